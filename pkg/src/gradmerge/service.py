"""HTTP front end: one route per operation, same semantics as the CLI.

The service is a thin shell over :mod:`gradmerge.workflows`; requests carry
the same fields the CLI flags resolve to, file outputs land on the server's
filesystem, and every domain error maps to a 400 with its category tag so
remote callers can print the same ``category: message`` line a local run
would produce.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from . import workflows
from .errors import GradmergeError


class MergeRequest(BaseModel):
    recipe: dict
    overrides: dict | None = None
    threads: int | None = None


class ImportanceRequest(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model: str
    calib: str
    out: str
    samples: int = 100


class SpectralRequest(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    grads: str
    pattern: str | None = None
    out: str | None = None
    csv: str | None = None
    model_id: str = ""
    singular_values: bool = False
    threads: int | None = None


class InjectRequest(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    base: str
    donor: str
    importance: str | dict
    p: float
    direction: str
    output: str
    lam: float = Field(1.0, alias="lambda")
    scope: str = "global"
    zero_policy: str = "include"
    include_patterns: list[str] | None = None
    exclude_patterns: list[str] | None = None
    dtype_policy: str = "keep"
    report_output: str | None = None
    threads: int | None = None


class InspectRequest(BaseModel):
    checkpoint: str


class ExperimentRequest(BaseModel):
    config: dict
    kind: str = "both"
    out_dir: str | None = None
    threads: int | None = None


def create_app() -> FastAPI:
    app = FastAPI(title="gradmerge", docs_url=None, redoc_url=None)

    @app.exception_handler(GradmergeError)
    async def _domain_error(request: Request, exc: GradmergeError) -> JSONResponse:
        return JSONResponse(
            status_code=400,
            content={"category": exc.category, "message": str(exc)},
        )

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/v1/merge")
    def merge(req: MergeRequest) -> dict:
        return workflows.merge_op(req.recipe, req.overrides, req.threads)

    @app.post("/v1/importance")
    def importance(req: ImportanceRequest) -> dict:
        return workflows.importance_op(req.model, req.calib, req.out, req.samples)

    @app.post("/v1/spectral")
    def spectral(req: SpectralRequest) -> dict:
        return workflows.spectral_op(
            req.grads,
            pattern=req.pattern,
            out=req.out,
            csv_out=req.csv,
            model_id=req.model_id,
            keep_singular_values=req.singular_values,
            threads=req.threads,
        )

    @app.post("/v1/inject")
    def inject(req: InjectRequest) -> dict:
        return workflows.inject_op(
            req.base,
            req.donor,
            req.importance,
            req.p,
            req.direction,
            req.output,
            lam=req.lam,
            scope=req.scope,
            zero_policy=req.zero_policy,
            include_patterns=req.include_patterns,
            exclude_patterns=req.exclude_patterns,
            dtype_policy=req.dtype_policy,
            report_output=req.report_output,
            threads=req.threads,
        )

    @app.post("/v1/inspect")
    def inspect(req: InspectRequest) -> dict:
        return workflows.inspect_op(req.checkpoint)

    @app.post("/v1/experiment")
    def experiment(req: ExperimentRequest) -> dict:
        return workflows.experiment_op(req.config, req.kind, req.out_dir, req.threads)

    return app

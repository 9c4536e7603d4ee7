/** Failure categories shared with the sister CLI: the category names the
 * recovery, the message names the offending input. */

export class ExtractorError extends Error {
  readonly category: string;

  constructor(category: string, message: string) {
    super(message);
    this.category = category;
    this.name = new.target.name;
  }
}

/** Bytes that do not parse as the checkpoint container or calibration JSON. */
export class FormatError extends ExtractorError {
  constructor(message: string) {
    super("format", message);
  }
}

/** Well-formed input that violates a documented constraint. */
export class ValidationError extends ExtractorError {
  constructor(message: string) {
    super("validation", message);
  }
}

/** Filesystem trouble: missing paths, unreadable or unwritable files. */
export class IoError extends ExtractorError {
  constructor(message: string) {
    super("io", message);
  }
}

/** Character-level tokenizer over printable ASCII plus newline.
 *
 * Ids 0..94 are character codes 32..126, id 95 is newline. Anything else is
 * a tokenization failure; callers skip and count the sample. A model with a
 * smaller vocabulary rejects the ids that fall outside it the same way.
 */

export const TOKENIZER_VOCAB = 96;

const NEWLINE_ID = 95;

export function tokenize(text: string, vocabSize: number): number[] | null {
  const ids: number[] = [];
  for (const ch of text) {
    const code = ch.codePointAt(0)!;
    let id: number;
    if (code >= 32 && code <= 126) {
      id = code - 32;
    } else if (code === 10) {
      id = NEWLINE_ID;
    } else {
      return null;
    }
    if (id >= vocabSize) return null;
    ids.push(id);
  }
  return ids;
}

export function checkTokenIds(tokens: number[], vocabSize: number): number[] | null {
  for (const id of tokens) {
    if (!Number.isInteger(id) || id < 0 || id >= vocabSize) return null;
  }
  return tokens;
}

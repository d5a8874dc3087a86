/**
 * Fixed keyboard mapping: digits 1..9 select category codes 0..8 and the
 * 0 key selects code 9, matching the `key` field the service advertises.
 */

import { CategoryChoice } from "./types.js";

export function keyForCode(code: number): string {
  if (!Number.isInteger(code) || code < 0 || code > 9) {
    throw new Error(`category code out of range: ${code}`);
  }
  return String((code + 1) % 10);
}

export function codeForKey(key: string): number | null {
  if (!/^[0-9]$/.test(key)) {
    return null;
  }
  const digit = Number(key);
  return digit === 0 ? 9 : digit - 1;
}

/** Every category maps to exactly one key and back (bijection). */
export function assertBijectiveKeymap(categories: CategoryChoice[]): void {
  const seenKeys = new Set<string>();
  for (const category of categories) {
    const expected = keyForCode(category.code);
    if (category.key !== expected) {
      throw new Error(
        `category ${category.name} advertises key ${category.key}, `
        + `expected ${expected}`);
    }
    if (seenKeys.has(category.key)) {
      throw new Error(`duplicate key binding ${category.key}`);
    }
    seenKeys.add(category.key);
    if (codeForKey(category.key) !== category.code) {
      throw new Error(`key ${category.key} does not map back to `
        + `code ${category.code}`);
    }
  }
}

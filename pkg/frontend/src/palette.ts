/** Action palette mined from codebook usage statistics.
 *
 * Usage counts are per code; the palette offers the most-used codes as
 * uniform index tuples (which is how trained models mostly emit them), with
 * lazily fetched one-step preview thumbnails per entry.
 */

import type { CodebookInfo, ServiceApi } from "./api.js";

export interface PaletteEntry {
  indices: number[];
  usage: number;
}

export function minePalette(info: CodebookInfo, minEntries = 6): PaletteEntry[] {
  const ranked = info.usage_counts
    .map((usage, code) => ({ code, usage }))
    .sort((a, b) => b.usage - a.usage || a.code - b.code);
  const used = ranked.filter((e) => e.usage > 0);
  const take = Math.max(minEntries, Math.min(used.length, minEntries));
  const chosen = (used.length >= minEntries ? used : ranked).slice(0, take);
  return chosen.map(({ code, usage }) => ({
    indices: new Array<number>(info.num_tokens).fill(code),
    usage,
  }));
}

/** One-step previews: step a throwaway session from the given frame. */
export class PreviewCache {
  private cache = new Map<string, string>();

  constructor(private readonly api: ServiceApi) {}

  async preview(fromFramePng: string, indices: number[]): Promise<string> {
    const key = `${fromFramePng.slice(0, 24)}|${indices.join(",")}`;
    const hit = this.cache.get(key);
    if (hit !== undefined) return hit;
    const scratch = await this.api.createSession({ png: fromFramePng }, 0);
    const stepped = await this.api.step(
      scratch.session_id,
      { indices },
      `preview-${key}`,
    );
    this.cache.set(key, stepped.frame_png);
    return stepped.frame_png;
  }
}

import { RateLimitError, ServiceClient } from "./api";
import { applyOverlay, cloneBuffer, PixelBuffer } from "./overlay";
import { QuerySession } from "./session";
import type { QueryHit, QueryResponse } from "./types";

export type PaintFn = (canvas: HTMLCanvasElement, buffer: PixelBuffer) => void;
export type LoadPixelsFn = (hit: QueryHit) => Promise<PixelBuffer>;

export interface GridOptions {
  /** Reads the displayed slice render into an RGBA buffer. */
  loadBasePixels: LoadPixelsFn;
  /** Puts a buffer onto a tile's overlay canvas. */
  paint: PaintFn;
  /** Overrides the tile image source, e.g. with an authenticated blob URL. */
  resolveImageSrc?: (hit: QueryHit) => Promise<string>;
  /** Waits before retrying a rate-limited explanation request. */
  delay?: (ms: number) => Promise<void>;
  maxExplainAttempts?: number;
}

export interface TileState {
  hit: QueryHit;
  element: HTMLElement;
  canvas: HTMLCanvasElement;
  toggle: HTMLButtonElement;
  base?: PixelBuffer;
  blended?: PixelBuffer;
}

function defaultDelay(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export function formatScore(similarity: number): string {
  return similarity.toFixed(4);
}

/** Renders retrieval responses as a row of tiles and drives the feedback
 * loop: clicking a tile issues the next query with that slice id.
 *
 * Tiles show exactly the ids and scores the service returned, in the order
 * it returned them; nothing is filtered or re-sorted on the client.
 */
export class RetrievalGrid {
  private readonly tiles: TileState[] = [];
  private readonly errorBanner: HTMLElement;
  private readonly queryLine: HTMLElement;
  private readonly tileRow: HTMLElement;
  private readonly delay: (ms: number) => Promise<void>;
  private readonly maxExplainAttempts: number;

  constructor(
    private readonly container: HTMLElement,
    private readonly session: QuerySession,
    private readonly client: ServiceClient,
    private readonly options: GridOptions,
  ) {
    this.delay = options.delay ?? defaultDelay;
    this.maxExplainAttempts = options.maxExplainAttempts ?? 5;
    this.container.classList.add("retrieval-grid");
    this.errorBanner = document.createElement("div");
    this.errorBanner.className = "error-banner";
    this.errorBanner.hidden = true;
    this.queryLine = document.createElement("div");
    this.queryLine.className = "query-line";
    this.tileRow = document.createElement("div");
    this.tileRow.className = "tiles";
    this.container.append(this.errorBanner, this.queryLine, this.tileRow);
  }

  /** Issues a query for the slice and re-renders on success. Service
   * failures land in the error banner; the previous grid stays up. */
  async promote(sliceId: string): Promise<void> {
    if (this.session.busy) return;
    try {
      const response = await this.session.queryBySlice(sliceId);
      this.showResponse(response);
    } catch (error) {
      this.showError(error instanceof Error ? error.message : String(error));
    }
  }

  showError(message: string): void {
    this.errorBanner.textContent = message;
    this.errorBanner.hidden = false;
  }

  showResponse(response: QueryResponse): void {
    this.errorBanner.hidden = true;
    this.errorBanner.textContent = "";
    this.tiles.length = 0;
    this.tileRow.replaceChildren();
    this.renderQueryLine(response);
    for (const hit of response.hits) {
      const tile = this.buildTile(hit);
      this.tiles.push(tile);
      this.tileRow.appendChild(tile.element);
    }
  }

  private renderQueryLine(response: QueryResponse): void {
    this.queryLine.replaceChildren();
    const label = document.createElement("span");
    label.className = "query-id";
    label.textContent = response.query_id === "" ? "uploaded image" : response.query_id;
    this.queryLine.append("query: ", label, ` (k=${response.k})`);
    if (response.clamped) {
      const clamped = document.createElement("span");
      clamped.className = "clamped-badge";
      clamped.textContent = "fewer candidates than k";
      this.queryLine.append(" ", clamped);
    }
    if (this.session.restrictToVolume !== undefined) {
      const filter = document.createElement("span");
      filter.className = "filter-badge";
      filter.textContent = `restricted to ${this.session.restrictToVolume}`;
      this.queryLine.append(" ", filter);
    }
  }

  private buildTile(hit: QueryHit): TileState {
    const element = document.createElement("figure");
    element.className = "tile";
    element.dataset.sliceId = hit.slice_id;

    const frame = document.createElement("div");
    frame.className = "frame";
    const image = document.createElement("img");
    image.alt = hit.slice_id;
    if (this.options.resolveImageSrc !== undefined) {
      void this.options.resolveImageSrc(hit).then((src) => {
        image.src = src;
      });
    } else {
      image.src = this.client.sliceUrl(hit.slice_id, "wide");
    }
    const canvas = document.createElement("canvas");
    canvas.className = "overlay-canvas";
    canvas.hidden = true;
    frame.append(image, canvas);
    frame.addEventListener("click", () => {
      void this.promote(hit.slice_id);
    });

    const caption = document.createElement("figcaption");
    const score = document.createElement("span");
    score.className = "score";
    score.textContent = formatScore(hit.similarity);
    const volume = document.createElement("span");
    volume.className = "volume-badge";
    volume.textContent = hit.volume_id;
    caption.append(score, " ", volume);
    if (hit.liver_label) {
      const liver = document.createElement("span");
      liver.className = "liver-badge";
      liver.textContent = "liver";
      caption.append(" ", liver);
    }

    const toggle = document.createElement("button");
    toggle.type = "button";
    toggle.className = "overlay-toggle";
    toggle.textContent = "saliency";
    const tile: TileState = { hit, element, canvas, toggle };
    toggle.addEventListener("click", () => {
      void this.toggleSaliency(tile);
    });

    element.append(frame, caption, toggle);
    return tile;
  }

  /** Lazily fetches the explanation, blends it over the slice render, and
   * flips the tile between blended and original pixels. Turning the overlay
   * off repaints the untouched base buffer, so the display returns to the
   * exact bytes it showed before. */
  async toggleSaliency(tile: TileState): Promise<void> {
    const sliceId = tile.hit.slice_id;
    const visible = this.session.toggleOverlay(sliceId);
    if (!visible) {
      if (tile.base !== undefined) {
        this.options.paint(tile.canvas, tile.base);
      }
      tile.element.classList.remove("overlay-on");
      return;
    }

    tile.element.classList.add("overlay-pending");
    try {
      if (tile.blended === undefined) {
        const explanation = await this.fetchExplanation(sliceId);
        if (tile.base === undefined) {
          tile.base = cloneBuffer(await this.options.loadBasePixels(tile.hit));
        }
        tile.blended = applyOverlay(tile.base, explanation.saliency);
      }
      tile.canvas.width = tile.blended.width;
      tile.canvas.height = tile.blended.height;
      tile.canvas.hidden = false;
      this.options.paint(tile.canvas, tile.blended);
      tile.element.classList.add("overlay-on");
    } catch (error) {
      this.session.toggleOverlay(sliceId);
      this.showError(error instanceof Error ? error.message : String(error));
    } finally {
      tile.element.classList.remove("overlay-pending");
    }
  }

  private async fetchExplanation(sliceId: string) {
    let attempt = 0;
    for (;;) {
      attempt += 1;
      try {
        return await this.client.explain(sliceId);
      } catch (error) {
        if (error instanceof RateLimitError && attempt < this.maxExplainAttempts) {
          await this.delay(error.retryAfterSeconds * 1000);
          continue;
        }
        throw error;
      }
    }
  }

  get tileElements(): readonly TileState[] {
    return this.tiles;
  }
}

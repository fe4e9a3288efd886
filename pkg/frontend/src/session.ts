import type { ServiceClient } from "./api";
import type { QueryRequest, QueryResponse } from "./types";

export interface HistoryEntry {
  request: QueryRequest;
  response: QueryResponse;
}

/** One user's retrieval loop: current query, filter, and what came back.
 *
 * History is append-only; at most one query is in flight at a time so a
 * slow response can never land on top of a newer grid.
 */
export class QuerySession {
  k = 5;
  restrictToVolume: string | undefined = undefined;
  private readonly entries: HistoryEntry[] = [];
  private readonly overlayOn = new Set<string>();
  private inFlight = false;

  constructor(private readonly client: ServiceClient) {}

  get history(): readonly HistoryEntry[] {
    return this.entries;
  }

  get current(): HistoryEntry | undefined {
    return this.entries[this.entries.length - 1];
  }

  get busy(): boolean {
    return this.inFlight;
  }

  async queryBySlice(sliceId: string): Promise<QueryResponse> {
    if (this.inFlight) {
      throw new Error("a query is already in flight");
    }
    const request: QueryRequest = { slice_id: sliceId, k: this.k };
    if (this.restrictToVolume !== undefined) {
      request.restrict_to_volume = this.restrictToVolume;
    }
    this.inFlight = true;
    try {
      const response = await this.client.query(request);
      this.entries.push({ request, response });
      return response;
    } finally {
      this.inFlight = false;
    }
  }

  overlayVisible(sliceId: string): boolean {
    return this.overlayOn.has(sliceId);
  }

  /** Returns the new visibility state for the tile. */
  toggleOverlay(sliceId: string): boolean {
    if (this.overlayOn.has(sliceId)) {
      this.overlayOn.delete(sliceId);
      return false;
    }
    this.overlayOn.add(sliceId);
    return true;
  }

  /** Rebuilds the per-step grids from recorded responses without touching
   * the service; used to audit that a grid is a pure function of what the
   * service returned. */
  replay(): QueryResponse[] {
    return this.entries.map((entry) => entry.response);
  }
}

import type {
  ActiveStoreResponse,
  DisplayWindow,
  ExplainResponse,
  HealthResponse,
  QueryRequest,
  QueryResponse,
} from "./types";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ServiceError extends Error {
  constructor(
    message: string,
    public readonly status: number,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

export class RateLimitError extends ServiceError {
  constructor(
    message: string,
    public readonly retryAfterSeconds: number,
  ) {
    super(message, 429);
    this.name = "RateLimitError";
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (typeof body.detail === "string") return body.detail;
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `request failed with status ${response.status}`;
}

export interface ClientOptions {
  baseUrl: string;
  token?: string;
  fetchFn?: FetchLike;
}

export class ServiceClient {
  private readonly baseUrl: string;
  private readonly token: string | undefined;
  private readonly fetchFn: FetchLike;

  constructor(options: ClientOptions) {
    this.baseUrl = options.baseUrl.replace(/\/+$/, "");
    this.token = options.token;
    this.fetchFn =
      options.fetchFn ?? ((url, init) => globalThis.fetch(url, init));
  }

  private headers(json: boolean): Record<string, string> {
    const headers: Record<string, string> = {};
    if (this.token !== undefined) {
      headers["Authorization"] = `Bearer ${this.token}`;
    }
    if (json) headers["Content-Type"] = "application/json";
    return headers;
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, {
      headers: this.headers(false),
    });
    if (!response.ok) await this.raise(response);
    return (await response.json()) as T;
  }

  private async raise(response: Response): Promise<never> {
    const detail = await errorDetail(response);
    if (response.status === 429) {
      const retryAfter = Number(response.headers.get("Retry-After") ?? "1");
      throw new RateLimitError(detail, Number.isFinite(retryAfter) ? retryAfter : 1);
    }
    throw new ServiceError(detail, response.status);
  }

  health(): Promise<HealthResponse> {
    return this.getJson<HealthResponse>("/health");
  }

  activeStore(): Promise<ActiveStoreResponse> {
    return this.getJson<ActiveStoreResponse>("/stores/active");
  }

  async query(request: QueryRequest): Promise<QueryResponse> {
    const response = await this.fetchFn(this.baseUrl + "/query", {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(request),
    });
    if (!response.ok) await this.raise(response);
    return (await response.json()) as QueryResponse;
  }

  explain(
    sliceId: string,
    options: { nMasks?: number; seed?: number } = {},
  ): Promise<ExplainResponse> {
    const params = new URLSearchParams();
    if (options.nMasks !== undefined) params.set("n_masks", String(options.nMasks));
    if (options.seed !== undefined) params.set("seed", String(options.seed));
    const encoded = params.toString();
    const suffix = encoded.length > 0 ? `?${encoded}` : "";
    return this.getJson<ExplainResponse>(
      `/explain/${encodeURIComponent(sliceId)}${suffix}`,
    );
  }

  sliceUrl(sliceId: string, window: DisplayWindow = "wide"): string {
    return `${this.baseUrl}/slices/${encodeURIComponent(sliceId)}?window=${window}`;
  }
}

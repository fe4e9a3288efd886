export interface HealthResponse {
  status: string;
  model_fingerprint: string;
  store_count: number;
}

export interface ActiveStoreResponse {
  fingerprint: string;
  count: number;
  dim: number;
  slice_ids: string[];
  volume_ids: string[];
}

export interface QueryHit {
  slice_id: string;
  similarity: number;
  liver_label: boolean;
  volume_id: string;
  url: string;
}

export interface QueryResponse {
  query_id: string;
  k: number;
  clamped: boolean;
  hits: QueryHit[];
}

export interface QueryRequest {
  slice_id?: string;
  k: number;
  restrict_to_volume?: string;
}

export interface ExplainResponse {
  slice_id: string;
  model_fingerprint: string;
  n_masks: number;
  n_masks_used: number;
  seed: number;
  grid: number[];
  p: number;
  shape: number[];
  saliency: number[][];
}

export type DisplayWindow = "narrow" | "wide";

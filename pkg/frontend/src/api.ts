// Thin typed client for the trip energy HTTP API. Every number the UI shows
// comes out of these responses; nothing is computed model-side in the browser.

export interface Segment {
  id: string;
  length_m: number;
  lanes: number;
  max_speed_kmh: number;
  road_type: string;
  oneway: boolean;
  polyline: [number, number][];
}

export interface SegmentEstimate {
  id: string;
  predicted_energy: number;
  predicted_speed: number;
}

export interface EstimateResponse {
  total_energy: number;
  segments: SegmentEstimate[];
  model_version: string;
  model: "personal" | "global";
  fallback: boolean;
  used_fallback_stats: boolean;
  reference_trip_ids: string[];
}

export interface EstimateRequest {
  driver_id: string;
  segment_ids: string[];
  departure_time: string | number;
  fallback?: boolean;
}

export interface DriverModelInfo {
  model: "personal" | "global";
  model_version: string;
}

export interface JobInfo {
  job_id: string;
  driver_id: string;
  status: "queued" | "running" | "done" | "failed";
  error: string | null;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

const BASE_URL: string =
  (globalThis as { TRIPENERGY_API?: string }).TRIPENERGY_API ?? "http://127.0.0.1:8000";

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const res = await fetch(BASE_URL + path, init);
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = await res.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(res.status, detail);
  }
  return res.json() as Promise<T>;
}

export function fetchNetwork(): Promise<Segment[]> {
  return request<Segment[]>("/network");
}

export function postEstimate(req: EstimateRequest, signal?: AbortSignal): Promise<EstimateResponse> {
  return request<EstimateResponse>("/estimate", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(req),
    signal,
  });
}

export function getDriverModel(driverId: string): Promise<DriverModelInfo> {
  return request<DriverModelInfo>(`/drivers/${encodeURIComponent(driverId)}/model`);
}

export function startFinetune(driverId: string): Promise<{ job_id: string; status: string }> {
  return request(`/drivers/${encodeURIComponent(driverId)}/finetune`, { method: "POST" });
}

export function getJob(jobId: string): Promise<JobInfo> {
  return request<JobInfo>(`/jobs/${encodeURIComponent(jobId)}`);
}

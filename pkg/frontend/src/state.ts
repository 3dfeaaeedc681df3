// Event-sourced app state. The reducer is pure and the render layer draws
// from state alone, so replaying a recorded event list reproduces the exact
// same screen (the replay test relies on this).

import type { EstimateResponse, JobInfo, Segment } from "./api.js";
import { emptyDraft, type RouteDraft } from "./viewmodel.js";

export type Slot = "A" | "B";

export type AppEvent =
  | { type: "network"; segments: Segment[] }
  | { type: "draft"; draft: RouteDraft }
  | { type: "estimate"; response: EstimateResponse }
  | { type: "slot-saved"; slot: Slot; draft: RouteDraft }
  | { type: "compared"; a: EstimateResponse | null; b: EstimateResponse | null }
  | { type: "banner"; message: string }
  | { type: "banner-dismissed"; index: number }
  | { type: "job"; job: JobInfo | null }
  | { type: "driver-model"; model: "personal" | "global" | null };

export interface AppState {
  segments: Segment[];
  draft: RouteDraft;
  live: EstimateResponse | null;
  slotDrafts: { A: RouteDraft | null; B: RouteDraft | null };
  comparison: { a: EstimateResponse | null; b: EstimateResponse | null };
  banners: string[];
  job: JobInfo | null;
  driverModel: "personal" | "global" | null;
}

export const initialState: AppState = {
  segments: [],
  draft: emptyDraft,
  live: null,
  slotDrafts: { A: null, B: null },
  comparison: { a: null, b: null },
  banners: [],
  job: null,
  driverModel: null,
};

export function reduce(state: AppState, event: AppEvent): AppState {
  switch (event.type) {
    case "network":
      return { ...state, segments: event.segments };
    case "draft":
      // a new draft invalidates the live estimate it was based on
      return { ...state, draft: event.draft, live: null };
    case "estimate":
      return { ...state, live: event.response };
    case "slot-saved":
      return { ...state, slotDrafts: { ...state.slotDrafts, [event.slot]: event.draft } };
    case "compared":
      return { ...state, comparison: { a: event.a, b: event.b } };
    case "banner":
      return { ...state, banners: [...state.banners, event.message] };
    case "banner-dismissed":
      return { ...state, banners: state.banners.filter((_, i) => i !== event.index) };
    case "job":
      return { ...state, job: event.job };
    case "driver-model":
      return { ...state, driverModel: event.model };
  }
}

export function replay(events: AppEvent[]): AppState {
  return events.reduce(reduce, initialState);
}

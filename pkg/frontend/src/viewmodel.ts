// Pure helpers that turn API responses into displayable values. Everything
// here is deterministic so a replayed session renders the same numbers.

import type { EstimateResponse, Segment } from "./api.js";
import { energyColor } from "./color.js";

export interface RouteDraft {
  driverId: string;
  segmentIds: string[];
  departure: string;
  fallback: boolean;
}

export const emptyDraft: RouteDraft = {
  driverId: "",
  segmentIds: [],
  departure: "",
  fallback: false,
};

export interface SegmentRow {
  id: string;
  energy: string;
  speed: string;
  color: string;
}

export interface EstimateView {
  total: string;
  totalValue: number;
  rows: SegmentRow[];
  modelBadge: "personal" | "global";
  modelVersion: string;
  usedFallbackStats: boolean;
}

export function fmtEnergy(x: number): string {
  return x.toFixed(3);
}

export function fmtSpeed(x: number): string {
  return x.toFixed(1);
}

export function buildEstimateView(resp: EstimateResponse): EstimateView {
  const energies = resp.segments.map((s) => s.predicted_energy);
  const lo = Math.min(...energies);
  const hi = Math.max(...energies);
  return {
    total: fmtEnergy(resp.total_energy),
    totalValue: resp.total_energy,
    rows: resp.segments.map((s) => ({
      id: s.id,
      energy: fmtEnergy(s.predicted_energy),
      speed: fmtSpeed(s.predicted_speed),
      color: energyColor(s.predicted_energy, lo, hi),
    })),
    modelBadge: resp.model,
    modelVersion: resp.model_version,
    usedFallbackStats: resp.used_fallback_stats,
  };
}

export interface CompareView {
  delta: string;
  winner: "A" | "B" | "tie";
}

/** Signed difference of the two totals (A minus B); the lower-energy route
 *  wins. The UI only reports the numbers, it never second-guesses them. */
export function compareTotals(a: EstimateResponse, b: EstimateResponse): CompareView {
  const delta = a.total_energy - b.total_energy;
  const sign = delta > 0 ? "+" : delta < 0 ? "-" : "";
  return {
    delta: sign + fmtEnergy(Math.abs(delta)),
    winner: delta < 0 ? "A" : delta > 0 ? "B" : "tie",
  };
}

function endpoints(seg: Segment): [number, number][] {
  const line = seg.polyline;
  return line.length ? [line[0], line[line.length - 1]] : [];
}

function touches(a: [number, number], b: [number, number]): boolean {
  return Math.abs(a[0] - b[0]) < 1e-9 && Math.abs(a[1] - b[1]) < 1e-9;
}

/** True when consecutive clicked segments share a polyline endpoint. Drafts
 *  that fail this are still estimable, the UI just flags them. */
export function isConnectedPath(ids: string[], byId: Map<string, Segment>): boolean {
  for (let i = 1; i < ids.length; i++) {
    const prev = byId.get(ids[i - 1]);
    const next = byId.get(ids[i]);
    if (!prev || !next) return false;
    const ok = endpoints(prev).some((p) => endpoints(next).some((q) => touches(p, q)));
    if (!ok) return false;
  }
  return true;
}

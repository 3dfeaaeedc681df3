// SVG road map. Segments render as polylines in network coordinates scaled
// to the viewBox; estimates recolor them and selection fattens the stroke.

import type { Segment } from "./api.js";

export const UNCOLORED = "#b8bcc4";
const VIEW = 600;
const PAD = 20;

interface Projection {
  x(lon: number): number;
  y(lat: number): number;
}

function fitProjection(segments: Segment[]): Projection {
  let minLat = Infinity, maxLat = -Infinity, minLon = Infinity, maxLon = -Infinity;
  for (const seg of segments) {
    for (const [lat, lon] of seg.polyline) {
      minLat = Math.min(minLat, lat);
      maxLat = Math.max(maxLat, lat);
      minLon = Math.min(minLon, lon);
      maxLon = Math.max(maxLon, lon);
    }
  }
  const span = Math.max(maxLat - minLat, maxLon - minLon) || 1;
  const scale = (VIEW - 2 * PAD) / span;
  return {
    x: (lon) => PAD + (lon - minLon) * scale,
    // SVG y grows downward, latitude grows upward
    y: (lat) => VIEW - PAD - (lat - minLat) * scale,
  };
}

export interface MapHandle {
  recolor(colors: Map<string, string>): void;
  select(ids: string[]): void;
  setTooltip(id: string, text: string): void;
  nearestSegment(clientX: number, clientY: number): string | null;
}

function pointToSegmentDistance(px: number, py: number, x1: number, y1: number, x2: number, y2: number): number {
  const dx = x2 - x1;
  const dy = y2 - y1;
  const lenSq = dx * dx + dy * dy;
  const t = lenSq ? Math.min(1, Math.max(0, ((px - x1) * dx + (py - y1) * dy) / lenSq)) : 0;
  return Math.hypot(px - (x1 + t * dx), py - (y1 + t * dy));
}

export function renderMap(
  svg: SVGSVGElement,
  segments: Segment[],
  onPick: (id: string) => void,
): MapHandle {
  svg.setAttribute("viewBox", `0 0 ${VIEW} ${VIEW}`);
  svg.innerHTML = "";
  const proj = fitProjection(segments);
  const lines = new Map<string, SVGPolylineElement>();
  const screenCoords = new Map<string, [number, number][]>();

  for (const seg of segments) {
    const pts = seg.polyline.map(([lat, lon]) => [proj.x(lon), proj.y(lat)] as [number, number]);
    screenCoords.set(seg.id, pts);
    const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
    line.setAttribute("points", pts.map(([x, y]) => `${x},${y}`).join(" "));
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", UNCOLORED);
    line.setAttribute("stroke-width", "4");
    line.setAttribute("stroke-linecap", "round");
    line.setAttribute("data-segment-id", seg.id);
    const title = document.createElementNS("http://www.w3.org/2000/svg", "title");
    title.textContent = `${seg.id} (${seg.road_type})`;
    line.appendChild(title);
    line.addEventListener("click", (ev) => {
      ev.stopPropagation();
      onPick(seg.id);
    });
    svg.appendChild(line);
    lines.set(seg.id, line);
  }

  const toLocal = (clientX: number, clientY: number): [number, number] => {
    const rect = svg.getBoundingClientRect();
    const w = rect.width || VIEW;
    const h = rect.height || VIEW;
    return [((clientX - rect.left) / w) * VIEW, ((clientY - rect.top) / h) * VIEW];
  };

  const nearestSegment = (clientX: number, clientY: number): string | null => {
    const [px, py] = toLocal(clientX, clientY);
    let best: string | null = null;
    let bestDist = Infinity;
    for (const [id, pts] of screenCoords) {
      for (let i = 1; i < pts.length; i++) {
        const d = pointToSegmentDistance(px, py, pts[i - 1][0], pts[i - 1][1], pts[i][0], pts[i][1]);
        if (d < bestDist) {
          bestDist = d;
          best = id;
        }
      }
    }
    return best;
  };

  // clicks that miss every polyline still pick the closest one
  svg.addEventListener("click", (ev) => {
    const id = nearestSegment(ev.clientX, ev.clientY);
    if (id) onPick(id);
  });

  return {
    recolor(colors) {
      for (const [id, line] of lines) {
        line.setAttribute("stroke", colors.get(id) ?? UNCOLORED);
      }
    },
    select(ids) {
      const chosen = new Set(ids);
      for (const [id, line] of lines) {
        line.setAttribute("stroke-width", chosen.has(id) ? "8" : "4");
      }
    },
    setTooltip(id, text) {
      const title = lines.get(id)?.querySelector("title");
      if (title) title.textContent = text;
    },
    nearestSegment,
  };
}

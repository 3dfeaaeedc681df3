// Continuous warm color scale for per-segment energy. Pale yellow is cheap,
// deep red is expensive; interpolation is piecewise linear between the stops.

const STOPS = ["#ffffb2", "#fed976", "#feb24c", "#fd8d3c", "#f03b20", "#bd0026"];

function parseHex(hex: string): [number, number, number] {
  return [
    parseInt(hex.slice(1, 3), 16),
    parseInt(hex.slice(3, 5), 16),
    parseInt(hex.slice(5, 7), 16),
  ];
}

function toHex(rgb: [number, number, number]): string {
  return "#" + rgb.map((c) => Math.round(c).toString(16).padStart(2, "0")).join("");
}

/** Color for `value` on the warm scale spanning [lo, hi]. A degenerate range
 *  (hi <= lo) paints everything with the midpoint color. */
export function energyColor(value: number, lo: number, hi: number): string {
  const t = hi > lo ? Math.min(1, Math.max(0, (value - lo) / (hi - lo))) : 0.5;
  const pos = t * (STOPS.length - 1);
  const i = Math.min(STOPS.length - 2, Math.floor(pos));
  const frac = pos - i;
  const a = parseHex(STOPS[i]);
  const b = parseHex(STOPS[i + 1]);
  return toHex([
    a[0] + (b[0] - a[0]) * frac,
    a[1] + (b[1] - a[1]) * frac,
    a[2] + (b[2] - a[2]) * frac,
  ]);
}

/** Orders colors from the scale by heat. Green and blue both drain away as
 *  energy rises, so their sum falls strictly along the scale. */
export function warmth(hex: string): number {
  const [, g, b] = parseHex(hex);
  return 510 - g - b;
}

export function legendStops(): string[] {
  return [...STOPS];
}

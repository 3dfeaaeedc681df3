// Wires the map, the draft controls, and the API together. All state changes
// flow through dispatch() so the session is recorded as an event list.

import {
  ApiError,
  fetchNetwork,
  getDriverModel,
  getJob,
  postEstimate,
  startFinetune,
  type EstimateResponse,
} from "./api.js";
import { renderMap, type MapHandle } from "./map.js";
import { initialState, reduce, type AppEvent, type AppState, type Slot } from "./state.js";
import {
  buildEstimateView,
  compareTotals,
  fmtEnergy,
  isConnectedPath,
  type RouteDraft,
} from "./viewmodel.js";

const PAGE = `
  <div class="layout">
    <svg id="map" width="600" height="600"></svg>
    <div class="panel">
      <div id="banners"></div>
      <label>Driver <input id="driver" placeholder="d001"></label>
      <label>Departure <input id="depart" placeholder="2021-01-04T08:30:00Z"></label>
      <label><input id="fallback" type="checkbox"> allow fallback for unseen drivers</label>
      <div id="path-flag" class="flag" hidden>clicked segments do not form a connected path</div>
      <div class="buttons">
        <button id="estimate">Estimate</button>
        <button id="clear">Clear route</button>
        <button id="save-a">Save as A</button>
        <button id="save-b">Save as B</button>
        <button id="compare">Compare A/B</button>
        <button id="finetune">Fine-tune driver</button>
      </div>
      <div id="badges">
        <span id="model-badge" class="badge" hidden></span>
        <span id="stats-badge" class="badge" hidden>population fallback</span>
      </div>
      <div class="total-line">Total <span id="total" class="num"></span> kWh
        <span id="model-version"></span></div>
      <table id="segments"><tbody></tbody></table>
      <div id="compare-panel" hidden>
        <div>A: <span id="total-a" class="num"></span> kWh</div>
        <div>B: <span id="total-b" class="num"></span> kWh</div>
        <div>delta (A-B): <span id="delta" class="num"></span> kWh</div>
        <div id="winner"></div>
      </div>
      <div id="job-status"></div>
    </div>
  </div>
`;

export interface AppOptions {
  pollIntervalMs?: number;
}

export interface App {
  events: AppEvent[];
  state(): AppState;
  init(): Promise<void>;
  render(state: AppState): void;
  pickSegment(id: string): void;
  root: HTMLElement;
}

export function createApp(root: HTMLElement, options: AppOptions = {}): App {
  root.innerHTML = PAGE;
  const pollMs = options.pollIntervalMs ?? 400;
  const el = <T extends HTMLElement>(sel: string) => root.querySelector(sel) as T;
  const svg = root.querySelector("#map") as SVGSVGElement;

  let state = initialState;
  const events: AppEvent[] = [];
  let map: MapHandle | null = null;
  let mappedSegments: AppState["segments"] | null = null;
  let inflight: AbortController | null = null;

  function render(s: AppState): void {
    if (s.segments.length && s.segments !== mappedSegments) {
      map = renderMap(svg, s.segments, pickSegment);
      mappedSegments = s.segments;
    }

    const flag = el("#path-flag");
    const byId = new Map(s.segments.map((seg) => [seg.id, seg]));
    flag.hidden = s.draft.segmentIds.length < 2 || isConnectedPath(s.draft.segmentIds, byId);

    const totalEl = el("#total");
    const modelBadge = el("#model-badge");
    const statsBadge = el("#stats-badge");
    const versionEl = el("#model-version");
    const tbody = root.querySelector("#segments tbody") as HTMLElement;
    tbody.innerHTML = "";
    if (s.live) {
      const view = buildEstimateView(s.live);
      totalEl.textContent = view.total;
      modelBadge.textContent = `${view.modelBadge} model`;
      modelBadge.hidden = false;
      statsBadge.hidden = !view.usedFallbackStats;
      versionEl.textContent = view.modelVersion;
      const colors = new Map(view.rows.map((r) => [r.id, r.color]));
      map?.recolor(colors);
      for (const row of view.rows) {
        const tr = document.createElement("tr");
        tr.innerHTML =
          `<td>${row.id}</td><td class="num">${row.energy}</td><td class="num">${row.speed}</td>`;
        (tr.children[1] as HTMLElement).style.color = row.color;
        tbody.appendChild(tr);
        map?.setTooltip(row.id, `${row.id}: ${row.energy} kWh at ${row.speed} m/s`);
      }
    } else {
      totalEl.textContent = "";
      modelBadge.hidden = true;
      statsBadge.hidden = true;
      versionEl.textContent = "";
      map?.recolor(new Map());
    }
    map?.select(s.draft.segmentIds);

    const panel = el("#compare-panel");
    const { a, b } = s.comparison;
    if (a || b) {
      panel.hidden = false;
      el("#total-a").textContent = a ? fmtEnergy(a.total_energy) : "unavailable";
      el("#total-b").textContent = b ? fmtEnergy(b.total_energy) : "unavailable";
      if (a && b) {
        const cmp = compareTotals(a, b);
        el("#delta").textContent = cmp.delta;
        el("#winner").textContent =
          cmp.winner === "tie" ? "routes tie" : `route ${cmp.winner} uses less energy`;
      } else {
        el("#delta").textContent = "";
        el("#winner").textContent = "single-route view: one estimate failed";
      }
    } else {
      panel.hidden = true;
    }

    const banners = el("#banners");
    banners.innerHTML = "";
    s.banners.forEach((message, i) => {
      const div = document.createElement("div");
      div.className = "banner";
      div.textContent = message + " ";
      const close = document.createElement("button");
      close.textContent = "dismiss";
      close.addEventListener("click", () => dispatch({ type: "banner-dismissed", index: i }));
      div.appendChild(close);
      banners.appendChild(div);
    });

    const jobEl = el("#job-status");
    if (s.job) {
      jobEl.textContent = `fine-tune ${s.job.status}` + (s.job.error ? `: ${s.job.error}` : "");
    } else if (s.driverModel) {
      jobEl.textContent = `driver has a ${s.driverModel} model`;
    } else {
      jobEl.textContent = "";
    }
  }

  function dispatch(event: AppEvent): void {
    events.push(event);
    state = reduce(state, event);
    render(state);
  }

  function currentDraft(): RouteDraft {
    return {
      driverId: el<HTMLInputElement>("#driver").value.trim(),
      segmentIds: [...state.draft.segmentIds],
      departure: el<HTMLInputElement>("#depart").value.trim(),
      fallback: el<HTMLInputElement>("#fallback").checked,
    };
  }

  function draftChanged(next: RouteDraft): void {
    inflight?.abort();
    inflight = null;
    dispatch({ type: "draft", draft: next });
  }

  function pickSegment(id: string): void {
    const ids = state.draft.segmentIds.includes(id)
      ? state.draft.segmentIds.filter((s) => s !== id)
      : [...state.draft.segmentIds, id];
    draftChanged({ ...currentDraft(), segmentIds: ids });
  }

  async function estimateDraft(draft: RouteDraft, signal?: AbortSignal): Promise<EstimateResponse | null> {
    try {
      return await postEstimate(
        {
          driver_id: draft.driverId,
          segment_ids: draft.segmentIds,
          departure_time: draft.departure,
          fallback: draft.fallback,
        },
        signal,
      );
    } catch (err) {
      if (err instanceof ApiError) {
        dispatch({ type: "banner", message: err.message });
      } else if ((err as Error).name !== "AbortError") {
        dispatch({ type: "banner", message: String(err) });
      }
      return null;
    }
  }

  async function runEstimate(): Promise<void> {
    const draft = currentDraft();
    draftChanged(draft);
    inflight = new AbortController();
    const signal = inflight.signal;
    const resp = await estimateDraft(draft, signal);
    if (resp && !signal.aborted) {
      dispatch({ type: "estimate", response: resp });
    }
  }

  async function runCompare(): Promise<void> {
    const { A, B } = state.slotDrafts;
    if (!A || !B) {
      dispatch({ type: "banner", message: "save two drafts to slots A and B first" });
      return;
    }
    const [a, b] = await Promise.all([estimateDraft(A), estimateDraft(B)]);
    dispatch({ type: "compared", a, b });
  }

  async function runFinetune(): Promise<void> {
    const driver = currentDraft().driverId;
    if (!driver) {
      dispatch({ type: "banner", message: "enter a driver id first" });
      return;
    }
    try {
      const { job_id } = await startFinetune(driver);
      let job = await getJob(job_id);
      dispatch({ type: "job", job });
      while (job.status === "queued" || job.status === "running") {
        await new Promise((r) => setTimeout(r, pollMs));
        job = await getJob(job_id);
        dispatch({ type: "job", job });
      }
      if (job.status === "done") {
        const info = await getDriverModel(driver);
        dispatch({ type: "job", job: null });
        dispatch({ type: "driver-model", model: info.model });
      }
    } catch (err) {
      const message = err instanceof ApiError ? err.message : String(err);
      dispatch({ type: "banner", message });
    }
  }

  el("#estimate").addEventListener("click", () => void runEstimate());
  el("#clear").addEventListener("click", () => draftChanged({ ...currentDraft(), segmentIds: [] }));
  el("#save-a").addEventListener("click", () =>
    dispatch({ type: "slot-saved", slot: "A" as Slot, draft: currentDraft() }),
  );
  el("#save-b").addEventListener("click", () =>
    dispatch({ type: "slot-saved", slot: "B" as Slot, draft: currentDraft() }),
  );
  el("#compare").addEventListener("click", () => void runCompare());
  el("#finetune").addEventListener("click", () => void runFinetune());
  for (const sel of ["#driver", "#depart", "#fallback"]) {
    el(sel).addEventListener("change", () => draftChanged(currentDraft()));
  }

  async function init(): Promise<void> {
    try {
      const segments = await fetchNetwork();
      dispatch({ type: "network", segments });
    } catch (err) {
      dispatch({ type: "banner", message: `could not load network: ${String(err)}` });
    }
  }

  render(state);
  return { events, state: () => state, init, render, pickSegment, root };
}

const rootEl = typeof document !== "undefined" ? document.getElementById("app") : null;
if (rootEl) {
  void createApp(rootEl).init();
}

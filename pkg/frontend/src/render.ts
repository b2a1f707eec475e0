import type { AppState } from "./state.js";
import { SPARSE_KEYPOINT_COLORS } from "./state.js";
import type { QueueItem, ViewPayload } from "./types.js";

const TILE_SCALE = 3;

export interface Handlers {
  onSelectSample(id: string): void;
  onDecide(decision: "accept" | "reject"): void;
  onToggle(layer: "contours" | "predicted" | "fitted"): void;
  onArmKeypoint(id: number | null): void;
  onTileClick(view: number, u: number, v: number): void;
  onIterate(): void;
}

export function render(root: HTMLElement, state: AppState, handlers: Handlers): void {
  root.textContent = "";
  if (state.banner) {
    const banner = el("div", "banner", state.banner);
    root.appendChild(banner);
  }
  const layout = el("div", "layout");
  layout.appendChild(renderSidebar(state, handlers));
  layout.appendChild(renderMain(state, handlers));
  root.appendChild(layout);
}

function el(tag: string, cls?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderSidebar(state: AppState, handlers: Handlers): HTMLElement {
  const side = el("div", "sidebar");
  const iterate = el("button", "iterate-btn", state.iterating ? "iterating…" : "run iteration") as HTMLButtonElement;
  iterate.disabled = state.iterating;
  iterate.onclick = () => handlers.onIterate();
  side.appendChild(iterate);

  if (state.lastReport) {
    const r = state.lastReport;
    const panel = el("div", "report");
    panel.appendChild(el("div", "report-line", `iteration ${r.iteration}`));
    panel.appendChild(el("div", "report-line", `heuristic |D^h| = ${r.num_heuristic}`));
    panel.appendChild(el("div", "report-line", `manual |D^m| = ${r.num_manual}`));
    panel.appendChild(el("div", "report-line", `annotated |D^l| = ${r.num_annotated}`));
    panel.appendChild(el("div", "report-line", `rejected = ${r.num_rejected}`));
    panel.appendChild(el("div", "report-line", `total accepted = ${r.accepted_total}`));
    side.appendChild(panel);
  }

  const list = el("div", "queue");
  if (!state.queue.length) {
    list.appendChild(el("div", "empty", "queue is empty"));
  }
  for (const item of state.queue) {
    list.appendChild(renderQueueRow(item, state, handlers));
  }
  side.appendChild(list);
  return side;
}

function renderQueueRow(item: QueueItem, state: AppState, handlers: Handlers): HTMLElement {
  const row = el("div", "queue-row" + (state.current?.id === item.id ? " selected" : ""));
  row.onclick = () => handlers.onSelectSample(item.id);
  row.appendChild(el("span", "queue-id", item.id));
  row.appendChild(el("span", "queue-conf", item.confidence.toFixed(3)));
  row.appendChild(el("span", "queue-state", item.state));
  if (item.heuristic) {
    const failed = item.heuristic.criteria.filter((c) => !c.passed);
    const label = failed.length
      ? `fails: ${failed.map((c) => `${c.name} (${c.margin.toFixed(3)})`).join(", ")}`
      : "heuristic margins ok";
    row.appendChild(el("div", "queue-margins", label));
  }
  return row;
}

function renderMain(state: AppState, handlers: Handlers): HTMLElement {
  const main = el("div", "main");
  if (!state.current) {
    main.appendChild(el("div", "empty", "select a sample from the queue"));
    return main;
  }
  const bundle = state.current;
  const bar = el("div", "toolbar");
  bar.appendChild(el("span", "sample-title", `${bundle.id} (${bundle.state})`));
  if (bundle.fit_missing) bar.appendChild(el("span", "warn", "fit missing"));

  for (const layer of ["contours", "predicted", "fitted"] as const) {
    const btn = el("button", state.overlays[layer] ? "toggle on" : "toggle", layer);
    btn.onclick = () => handlers.onToggle(layer);
    bar.appendChild(btn);
  }
  const accept = el("button", "decide accept", "accept") as HTMLButtonElement;
  accept.onclick = () => handlers.onDecide("accept");
  const reject = el("button", "decide reject", "reject") as HTMLButtonElement;
  reject.onclick = () => handlers.onDecide("reject");
  bar.appendChild(accept);
  bar.appendChild(reject);
  main.appendChild(bar);

  const legend = el("div", "legend");
  legend.appendChild(el("span", "legend-label", "annotate:"));
  for (const id of bundle.sparse_keypoint_ids) {
    const swatch = el(
      "button",
      "swatch" + (state.annotateKeypoint === id ? " armed" : ""),
      id === 0 ? "wrist" : `tip ${id}`,
    );
    (swatch as HTMLElement).style.borderColor = SPARSE_KEYPOINT_COLORS[id] ?? "#888";
    swatch.onclick = () =>
      handlers.onArmKeypoint(state.annotateKeypoint === id ? null : id);
    legend.appendChild(swatch);
  }
  main.appendChild(legend);

  const grid = el("div", "grid");
  for (const view of bundle.views) {
    grid.appendChild(renderTile(view, state, handlers));
  }
  main.appendChild(grid);
  return main;
}

function renderTile(view: ViewPayload, state: AppState, handlers: Handlers): HTMLElement {
  const tile = el("div", "tile");
  const canvas = document.createElement("canvas");
  canvas.width = view.width * TILE_SCALE;
  canvas.height = view.height * TILE_SCALE;
  tile.appendChild(canvas);
  const badge = el("div", "iou-badge", view.iou === null ? "IoU –" : `IoU ${view.iou.toFixed(2)}`);
  if (view.iou !== null && view.iou < 0.5) badge.classList.add("low");
  tile.appendChild(badge);

  canvas.onclick = (ev) => {
    const rect = canvas.getBoundingClientRect();
    const u = ((ev.clientX - rect.left) / rect.width) * view.width;
    const v = ((ev.clientY - rect.top) / rect.height) * view.height;
    handlers.onTileClick(view.view, u, v);
  };

  const ctx = canvas.getContext("2d");
  if (!ctx) return tile;
  ctx.fillStyle = "#181818";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  const drawOverlays = () => drawTile(ctx, view, state);
  if (view.mask_url) {
    const img = new Image();
    img.onload = () => {
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
      drawOverlays();
    };
    img.src = view.mask_url;
  } else {
    drawOverlays();
  }
  return tile;
}

/** Overlays come verbatim from the bundle; no geometry is done client-side. */
function drawTile(ctx: CanvasRenderingContext2D, view: ViewPayload, state: AppState): void {
  const s = TILE_SCALE;
  if (state.overlays.contours) {
    ctx.strokeStyle = "#00d0ff";
    ctx.lineWidth = 1.5;
    for (const polyline of view.contours) {
      if (!polyline.length) continue;
      ctx.beginPath();
      ctx.moveTo(polyline[0][0] * s, polyline[0][1] * s);
      for (const [u, v] of polyline.slice(1)) ctx.lineTo(u * s, v * s);
      ctx.stroke();
    }
  }
  if (state.overlays.predicted && view.predicted_keypoints) {
    ctx.fillStyle = "#ffe14d";
    for (const [u, v] of view.predicted_keypoints) {
      ctx.beginPath();
      ctx.arc(u * s, v * s, 2.5, 0, Math.PI * 2);
      ctx.fill();
    }
  }
  if (state.overlays.fitted && view.fitted_keypoints) {
    ctx.strokeStyle = "#ff4d6d";
    ctx.lineWidth = 1.5;
    for (const [u, v] of view.fitted_keypoints) {
      ctx.beginPath();
      ctx.arc(u * s, v * s, 3.5, 0, Math.PI * 2);
      ctx.stroke();
    }
  }
  for (const ann of state.pendingAnnotations) {
    if (ann.view !== view.view) continue;
    ctx.strokeStyle = SPARSE_KEYPOINT_COLORS[ann.keypointId] ?? "#fff";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo((ann.u - 2) * s, ann.v * s);
    ctx.lineTo((ann.u + 2) * s, ann.v * s);
    ctx.moveTo(ann.u * s, (ann.v - 2) * s);
    ctx.lineTo(ann.u * s, (ann.v + 2) * s);
    ctx.stroke();
  }
}

/**
 * Browser entry point: upload an image, click to place prompt points
 * (left-click positive, Shift/right-click negative), watch the returned
 * mask live, toggle task and mode, undo, and export the mask as PNG.
 */

import { ApiClient } from "./api.js";
import { exportFilename, maskToGrayRgba, overlayRgba, renderPoints } from "./render.js";
import { SessionStore } from "./state.js";

const TASKS = ["RV", "FAZ", "capillary", "artery", "vein"];
const api = new ApiClient("");

let store: SessionStore | null = null;
let imageBitmap: ImageBitmap | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function setupControls(): void {
  const taskSelect = el<HTMLSelectElement>("task");
  for (const task of TASKS) {
    const opt = document.createElement("option");
    opt.value = task;
    opt.textContent = task;
    taskSelect.appendChild(opt);
  }

  el<HTMLInputElement>("file").addEventListener("change", async (ev) => {
    const input = ev.target as HTMLInputElement;
    const file = input.files?.[0];
    if (file) await openSession(file);
  });

  el<HTMLSelectElement>("mode").addEventListener("change", (ev) => {
    store?.setMode((ev.target as HTMLSelectElement).value);
  });

  el<HTMLInputElement>("opacity").addEventListener("input", (ev) => {
    store?.setOpacity(Number((ev.target as HTMLInputElement).value) / 100);
  });

  el<HTMLButtonElement>("undo").addEventListener("click", () => void store?.undoPoint());
  el<HTMLButtonElement>("export").addEventListener("click", exportMask);

  const canvas = el<HTMLCanvasElement>("overlay");
  canvas.addEventListener("click", (ev) => void handleClick(ev, ev.shiftKey ? 0 : 1));
  canvas.addEventListener("contextmenu", (ev) => {
    ev.preventDefault();
    void handleClick(ev, 0);
  });
}

async function openSession(file: File): Promise<void> {
  const task = el<HTMLSelectElement>("task").value;
  const mode = el<HTMLSelectElement>("mode").value;
  try {
    const info = await api.createSession(file, task, mode);
    imageBitmap = await createImageBitmap(file);
    store = new SessionStore(api.forSession(info.id), info.id, info.w, info.h, task, mode);
    store.subscribe(render);
    const base = el<HTMLCanvasElement>("base");
    const overlay = el<HTMLCanvasElement>("overlay");
    base.width = overlay.width = info.w;
    base.height = overlay.height = info.h;
    base.getContext("2d")!.drawImage(imageBitmap, 0, 0, info.w, info.h);
    status(`session ${info.id.slice(0, 8)} (${info.w}x${info.h}, ${task})`);
    render(store.state());
  } catch (err) {
    status(`upload failed: ${err}`);
  }
}

async function handleClick(ev: MouseEvent, polarity: 0 | 1): Promise<void> {
  if (!store) return;
  const canvas = el<HTMLCanvasElement>("overlay");
  const rect = canvas.getBoundingClientRect();
  const x = ((ev.clientX - rect.left) / rect.width) * store.w;
  const y = ((ev.clientY - rect.top) / rect.height) * store.h;
  await store.placePoint(x, y, polarity);
}

function render(state: ReturnType<SessionStore["state"]>): void {
  const canvas = el<HTMLCanvasElement>("overlay");
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (state.mask) {
    const rgba = overlayRgba(state.mask, state.w, state.h, state.opacity);
    ctx.putImageData(new ImageData(rgba, state.w, state.h), 0, 0);
  }
  for (const p of renderPoints(state.points, state.task)) {
    ctx.beginPath();
    ctx.arc(p.x, p.y, Math.max(2, state.w / 100), 0, 2 * Math.PI);
    ctx.fillStyle = p.color;
    ctx.fill();
    ctx.strokeStyle = "white";
    ctx.stroke();
  }
  el<HTMLButtonElement>("undo").disabled = !store?.canUndo;
  el<HTMLButtonElement>("export").disabled = !state.mask;
  const conf = state.confidence === null ? "" : ` confidence ${state.confidence.toFixed(3)}`;
  status(
    state.lastError
      ? `error: ${state.lastError} (retry by clicking again)`
      : `${state.points.length} points${conf}${state.busy ? " ..." : ""}`
  );
}

function exportMask(): void {
  const state = store?.state();
  if (!store || !state?.mask) return;
  const canvas = document.createElement("canvas");
  canvas.width = state.w;
  canvas.height = state.h;
  const ctx = canvas.getContext("2d")!;
  ctx.putImageData(new ImageData(maskToGrayRgba(state.mask, state.w, state.h), state.w, state.h), 0, 0);
  canvas.toBlob((blob) => {
    if (!blob) return;
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = exportFilename(store!.sessionId);
    a.click();
    URL.revokeObjectURL(a.href);
  }, "image/png");
}

function status(text: string): void {
  el<HTMLSpanElement>("status").textContent = text;
}

setupControls();
void api
  .modelInfo()
  .then((info) => status(`model: ${info.variant} task ${info.task}`))
  .catch(() => status("service unreachable"));

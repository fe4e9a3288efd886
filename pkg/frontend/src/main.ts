import { ServiceClient } from "./api";
import { RetrievalGrid } from "./grid";
import type { PixelBuffer } from "./overlay";
import { QuerySession } from "./session";
import type { QueryHit } from "./types";

const baseUrl = import.meta.env.VITE_API_BASE ?? "http://127.0.0.1:8000";
const token = import.meta.env.VITE_API_TOKEN;

const client = new ServiceClient({ baseUrl, token });
const session = new QuerySession(client);

async function fetchSliceBlobUrl(hit: QueryHit): Promise<string> {
  const headers: Record<string, string> = {};
  if (token !== undefined) headers["Authorization"] = `Bearer ${token}`;
  const response = await fetch(client.sliceUrl(hit.slice_id, "wide"), {
    headers,
  });
  if (!response.ok) {
    throw new Error(`slice render failed with status ${response.status}`);
  }
  return URL.createObjectURL(await response.blob());
}

async function loadBasePixels(hit: QueryHit): Promise<PixelBuffer> {
  const headers: Record<string, string> = {};
  if (token !== undefined) headers["Authorization"] = `Bearer ${token}`;
  const response = await fetch(client.sliceUrl(hit.slice_id, "wide"), {
    headers,
  });
  if (!response.ok) {
    throw new Error(`slice render failed with status ${response.status}`);
  }
  const bitmap = await createImageBitmap(await response.blob());
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d");
  if (ctx === null) throw new Error("2d canvas context unavailable");
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  return { width: data.width, height: data.height, data: data.data };
}

function paint(canvas: HTMLCanvasElement, buffer: PixelBuffer): void {
  const ctx = canvas.getContext("2d");
  if (ctx === null) return;
  ctx.putImageData(
    new ImageData(new Uint8ClampedArray(buffer.data), buffer.width, buffer.height),
    0,
    0,
  );
}

async function boot(): Promise<void> {
  const app = document.getElementById("app");
  if (app === null) throw new Error("missing #app mount point");

  const controls = document.createElement("div");
  controls.className = "controls";
  const status = document.createElement("div");
  status.className = "status-line";
  const slicePicker = document.createElement("select");
  slicePicker.className = "slice-picker";
  const volumePicker = document.createElement("select");
  volumePicker.className = "volume-picker";
  const kInput = document.createElement("input");
  kInput.type = "number";
  kInput.min = "1";
  kInput.value = String(session.k);
  const runButton = document.createElement("button");
  runButton.type = "button";
  runButton.textContent = "query";
  controls.append(slicePicker, volumePicker, kInput, runButton);

  const gridHost = document.createElement("div");
  app.append(status, controls, gridHost);

  const grid = new RetrievalGrid(gridHost, session, client, {
    loadBasePixels,
    paint,
    resolveImageSrc: fetchSliceBlobUrl,
  });

  try {
    const health = await client.health();
    const store = await client.activeStore();
    status.textContent =
      `model ${health.model_fingerprint}, ${store.count} slices, dim ${store.dim}`;
    for (const sliceId of store.slice_ids) {
      const option = document.createElement("option");
      option.value = sliceId;
      option.textContent = sliceId;
      slicePicker.appendChild(option);
    }
    const anyVolume = document.createElement("option");
    anyVolume.value = "";
    anyVolume.textContent = "all volumes";
    volumePicker.appendChild(anyVolume);
    for (const volumeId of store.volume_ids) {
      const option = document.createElement("option");
      option.value = volumeId;
      option.textContent = volumeId;
      volumePicker.appendChild(option);
    }
  } catch (error) {
    status.textContent =
      error instanceof Error ? error.message : "service unreachable";
    return;
  }

  runButton.addEventListener("click", () => {
    session.k = Math.max(1, Number(kInput.value) || session.k);
    session.restrictToVolume =
      volumePicker.value === "" ? undefined : volumePicker.value;
    void grid.promote(slicePicker.value);
  });
}

void boot();

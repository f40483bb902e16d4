/** Playground wiring: pick actions, watch generated frames, steer live. */

import { ApiClient, ApiError, type CodebookInfo } from "./api.js";
import { minePalette, PreviewCache } from "./palette.js";
import { SessionController, validateIndices, type ActionSource } from "./session.js";

const baseUrl = (window as { LAMWORLD_API?: string }).LAMWORLD_API ?? "http://127.0.0.1:8321";
const api = new ApiClient(baseUrl);
const previews = new PreviewCache(api);

let session: SessionController | null = null;
let codebook: CodebookInfo | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function logLine(message: string): void {
  const log = el<HTMLPreElement>("event-log");
  log.textContent = `${message}\n${log.textContent ?? ""}`.slice(0, 4000);
}

function renderStrip(): void {
  if (!session) return;
  session.checkInvariant();
  const strip = el<HTMLDivElement>("strip");
  strip.replaceChildren(
    ...session.frames.map((png, i) => {
      const cell = document.createElement("figure");
      const img = document.createElement("img");
      img.src = `data:image/png;base64,${png}`;
      img.width = 96;
      img.height = 96;
      const caption = document.createElement("figcaption");
      const entry = session!.log[i - 1];
      caption.textContent = i === 0 ? "t=0" : `t=${i} [${entry?.source}] ${entry?.indices.join(",")}`;
      cell.append(img, caption);
      return cell;
    }),
  );
}

async function stepWith(indices: number[], source: ActionSource): Promise<void> {
  if (!session || session.busy) return;
  try {
    const response = await session.step(indices, source);
    logLine(`step ${source} [${indices.join(",")}] ${response.latency_ms.toFixed(0)}ms`);
    renderStrip();
  } catch (error) {
    logLine(`step failed, state unchanged: ${String(error)}`);
    renderStrip();
  }
}

async function refreshPalette(): Promise<void> {
  const grid = el<HTMLDivElement>("palette");
  if (!codebook) {
    grid.textContent = "service unreachable";
    return;
  }
  const entries = minePalette(codebook);
  grid.replaceChildren(
    ...entries.map((entry) => {
      const button = document.createElement("button");
      button.className = "palette-btn";
      button.textContent = entry.indices.join(",");
      button.title = `codebook usage ${entry.usage}`;
      button.addEventListener("click", () => void stepWith(entry.indices, "manual"));
      button.addEventListener("mouseenter", () => {
        if (!session || button.dataset.previewed) return;
        void previews.preview(session.currentFrame, entry.indices).then((png) => {
          button.dataset.previewed = "1";
          button.style.backgroundImage = `url(data:image/png;base64,${png})`;
        });
      });
      return button;
    }),
  );
}

async function connect(): Promise<void> {
  try {
    codebook = await api.codebook();
    el<HTMLSpanElement>("codebook-info").textContent =
      `codebook |C|=${codebook.size}, N=${codebook.num_tokens}`;
    session = await SessionController.create(
      api,
      { dataset: el<HTMLInputElement>("dataset").value, clip: 0, frame: 0 },
      Number(el<HTMLInputElement>("seed").value),
    );
    logLine(`session ${session.sessionId} created`);
    renderStrip();
    await refreshPalette();
  } catch (error) {
    codebook = null;
    logLine(`connect failed: ${String(error)}`);
    await refreshPalette();
  }
}

function wire(): void {
  el<HTMLButtonElement>("connect").addEventListener("click", () => void connect());

  el<HTMLButtonElement>("step-free").addEventListener("click", () => {
    if (!codebook) return;
    const raw = el<HTMLInputElement>("free-indices").value;
    const checked = validateIndices(raw, codebook.num_tokens, codebook.size);
    const errorBox = el<HTMLSpanElement>("free-error");
    if (checked.error || !checked.indices) {
      errorBox.textContent = checked.error ?? "invalid";
      return;
    }
    errorBox.textContent = "";
    void stepWith(checked.indices, "manual");
  });

  el<HTMLButtonElement>("suggest").addEventListener("click", async () => {
    if (!session) return;
    const instruction = el<HTMLInputElement>("instruction").value;
    try {
      const { indices } = await session.suggest(instruction);
      el<HTMLInputElement>("free-indices").value = indices.join(",");
      el<HTMLSpanElement>("suggestion-info").textContent =
        `policy suggests [${indices.join(",")}]; edit or press its step button`;
    } catch (error) {
      logLine(`suggest failed: ${String(error)}`);
    }
  });

  el<HTMLButtonElement>("suggest-step").addEventListener("click", async () => {
    if (!session || !codebook) return;
    const instruction = el<HTMLInputElement>("instruction").value;
    try {
      const { indices } = await session.suggest(instruction);
      await stepWith(indices, "suggested");
    } catch (error) {
      logLine(`suggest failed: ${String(error)}`);
    }
  });

  el<HTMLInputElement>("extract-files").addEventListener("change", async (event) => {
    const input = event.target as HTMLInputElement;
    if (!session || !input.files || input.files.length !== 2) return;
    const [obs, goal] = [input.files[0], input.files[1]];
    const toB64 = (file: File) =>
      new Promise<string>((resolve, reject) => {
        const reader = new FileReader();
        reader.onload = () => resolve(String(reader.result).split(",")[1] ?? "");
        reader.onerror = () => reject(reader.error);
        reader.readAsDataURL(file);
      });
    try {
      const { indices } = await api.extract(await toB64(obs!), await toB64(goal!));
      logLine(`extracted [${indices.join(",")}] from uploaded pair`);
      await stepWith(indices, "extracted");
    } catch (error) {
      logLine(`extract failed: ${String(error)}`);
    }
  });
}

wire();

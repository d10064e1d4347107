import init, { disk_curves, TerrainDemo, SplatDemo } from "./pkg/photosplat_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function blit(canvas, bytes, size) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(bytes), size, size), 0, 0);
}

function drawCurves() {
  const emission = num("emission");
  $("emission-out").textContent = `${emission}°`;
  const n = 91;
  const values = disk_curves(emission, n);
  const canvas = $("curves");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  const ymax = Math.max(1, ...values);
  const x = (k) => pad + (k / (n - 1)) * (w - 2 * pad);
  const y = (v) => h - pad - (v / ymax) * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
  ctx.fillStyle = "#555";
  ctx.fillText("0°", pad - 4, h - pad + 14);
  ctx.fillText("90°", w - pad - 10, h - pad + 14);
  ctx.fillText(ymax.toFixed(1), 2, pad + 4);
  ["#1f77b4", "#d62728", "#2ca02c"].forEach((color, m) => {
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    for (let k = 0; k < n; k++) {
      const v = values[m * n + k];
      if (k === 0) ctx.moveTo(x(k), y(v));
      else ctx.lineTo(x(k), y(v));
    }
    ctx.stroke();
  });
}

let terrain = null;
let terrainSeed = null;
function drawTerrain() {
  const seed = Math.max(0, Math.floor(num("t-seed")));
  if (terrain === null || seed !== terrainSeed) {
    terrain?.free();
    terrain = new TerrainDemo(BigInt(seed), 256);
    terrainSeed = seed;
  }
  const bytes = terrain.render($("t-model").value, num("t-az"), num("t-el"), 2.2);
  blit($("terrain"), bytes, terrain.size());
}

let splats = null;
function drawSplats() {
  const t0 = performance.now();
  const bytes = splats.render($("s-model").value, $("s-map").value, num("s-az"), num("s-el"), num("s-cam"));
  blit($("splats"), bytes, 192);
  $("s-info").textContent = `${splats.count()} splats, ${(performance.now() - t0).toFixed(0)} ms`;
}

function wire(ids, draw) {
  for (const id of ids) $(id).addEventListener("input", draw);
}

async function main() {
  await init();
  splats = new SplatDemo(3000, 192);
  $("status").textContent = "";
  wire(["emission"], drawCurves);
  wire(["t-model", "t-az", "t-el", "t-seed"], drawTerrain);
  wire(["s-model", "s-map", "s-az", "s-el", "s-cam"], drawSplats);
  drawCurves();
  drawTerrain();
  drawSplats();
}

main().catch((e) => {
  $("status").textContent = `Failed to start: ${e}`;
});

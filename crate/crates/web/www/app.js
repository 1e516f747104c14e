import init, { uncertainty_heatmap, similarity_demo, training_trace } from "./pkg/cmkd_web.js";

const $ = (id) => document.getElementById(id);
const EXTENT = 1.5;

function bindOutputs() {
  for (const input of document.querySelectorAll("input[type=range]")) {
    const out = input.nextElementSibling;
    const show = () => (out.textContent = input.value);
    input.addEventListener("input", show);
    show();
  }
}

// value in [0, 1] to an rgb triple on a dark-to-bright ramp
function ramp(t) {
  t = Math.min(1, Math.max(0, t));
  return [Math.round(255 * Math.sqrt(t)), Math.round(220 * t * t), Math.round(120 * (1 - t) + 60 * t)];
}

function paintGrid(canvas, values, n, lo, hi) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(n, n);
  const span = hi - lo || 1;
  values.forEach((v, i) => {
    const [r, g, b] = ramp((v - lo) / span);
    img.data.set([r, g, b, 255], i * 4);
  });
  const tmp = new OffscreenCanvas(n, n);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function drawHeatmap() {
  const size = 120;
  const u = uncertainty_heatmap(+$("h-beta").value, +$("h-tau").value, $("h-inverse").checked, size);
  const lo = Math.min(...u), hi = Math.max(...u);
  const canvas = $("heat");
  paintGrid(canvas, u, size, lo, hi);
  const ctx = canvas.getContext("2d");
  ctx.fillStyle = "#fff";
  for (let k = 0; k < 3; k++) {
    const a = (k * 2 * Math.PI) / 3;
    const x = ((Math.cos(a) + EXTENT) / (2 * EXTENT)) * canvas.width;
    const y = ((EXTENT - Math.sin(a)) / (2 * EXTENT)) * canvas.height;
    ctx.beginPath();
    ctx.arc(x, y, 4, 0, 2 * Math.PI);
    ctx.fill();
  }
  $("h-range").textContent = `u from ${lo.toFixed(4)} to ${hi.toFixed(4)}`;
}

function drawSimilarity() {
  const r = JSON.parse(similarity_demo(+$("s-n").value, 16, +$("s-noise").value, +$("s-beta").value, BigInt($("s-seed").value || 0)));
  const lo = Math.min(...r.q), hi = Math.max(...r.q);
  paintGrid($("sim"), r.q, r.n, lo, hi);
  $("s-out").textContent =
    `InfoNCE ${r.loss.toFixed(4)} (chance ln N = ${r.chance_loss.toFixed(4)})\n` +
    `${r.matched} of ${r.n} students rank their own teacher first`;
}

function plot(canvas, series, colors) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const all = series.flat();
  const lo = Math.min(...all), hi = Math.max(...all);
  const pad = 24;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, 4, w - pad - 4, h - pad - 4);
  ctx.fillStyle = "#666";
  ctx.fillText(hi.toFixed(2), 0, 12);
  ctx.fillText(lo.toFixed(2), 0, h - pad);
  series.forEach((s, k) => {
    ctx.strokeStyle = colors[k];
    ctx.beginPath();
    s.forEach((v, i) => {
      const x = pad + (i / Math.max(1, s.length - 1)) * (w - pad - 4);
      const y = 4 + (1 - (v - lo) / (hi - lo || 1)) * (h - pad - 4);
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
  });
}

function runTraining() {
  $("t-out").textContent = "training...";
  // let the message paint before the synchronous run
  setTimeout(() => {
    const w = (id) => ($(id).checked ? 1 : 0);
    const started = performance.now();
    const r = JSON.parse(training_trace(w("t-sim"), w("t-unc"), w("t-kd"), +$("t-epochs").value, 0n));
    plot($("trace"), [r.train_total, r.val_task], ["#1f77b4", "#ff7f0e"]);
    $("t-out").textContent =
      `${r.mask}: best epoch ${r.best_epoch}\n` +
      `accuracy ${r.accuracy.toFixed(3)}, clean accuracy ${r.clean_accuracy.toFixed(3)}\n` +
      `${((performance.now() - started) / 1000).toFixed(1)} s`;
  }, 10);
}

await init();
bindOutputs();
for (const id of ["h-beta", "h-tau", "h-inverse"]) $(id).addEventListener("input", drawHeatmap);
for (const id of ["s-n", "s-noise", "s-beta", "s-seed"]) $(id).addEventListener("input", drawSimilarity);
$("t-run").addEventListener("click", runTraining);
drawHeatmap();
drawSimilarity();

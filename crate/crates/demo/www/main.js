import init, { lr_schedule, Race } from "./pkg/gres2net_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = { gres2net: "#c0392b", res2net: "#2471a3" };

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
}

function polyline(ctx, xs, ys, color, dashed) {
  ctx.strokeStyle = color;
  ctx.setLineDash(dashed ? [5, 4] : []);
  ctx.beginPath();
  xs.forEach((x, i) => (i ? ctx.lineTo(x, ys[i]) : ctx.moveTo(x, ys[i])));
  ctx.stroke();
  ctx.setLineDash([]);
}

function drawSchedule() {
  const canvas = $("lr");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  let lr;
  try {
    lr = lr_schedule(num("lr0"), num("factor"), num("every"), num("epochs"));
  } catch (e) {
    $("status").textContent = e.message;
    return;
  }
  $("status").textContent = "";
  axes(ctx, w, h, pad);
  // log scale so every decay step is the same height
  const logs = Array.from(lr, Math.log10);
  const lo = Math.min(...logs), hi = Math.max(...logs);
  const span = hi - lo || 1;
  const xs = logs.map((_, i) => pad + (i / Math.max(1, logs.length - 1)) * (w - 2 * pad));
  const ys = logs.map((v) => h - pad - ((v - lo) / span) * (h - 2 * pad));
  polyline(ctx, xs, ys, "#333", false);
  ctx.fillStyle = "#333";
  ctx.fillText(`${lr[0].toExponential(1)}`, pad + 4, pad + 10);
  ctx.fillText(`${lr[lr.length - 1].toExponential(1)}`, w - pad - 50, h - pad - 6);
}

let race = null;
let history = [];
let timer = null;

function resetRace() {
  stop();
  try {
    race = new Race(num("seed"), num("groups"), num("width"));
    $("status").textContent = "";
  } catch (e) {
    race = null;
    $("status").textContent = e.message;
  }
  history = [];
  drawRace();
  $("race-text").textContent = "";
}

function stepRace() {
  if (!race) return;
  const lanes = JSON.parse(race.step());
  history.push(lanes);
  drawRace();
  $("race-text").textContent = lanes
    .map((l) =>
      `${l.model.padEnd(9)} epoch ${l.epoch}  lr ${l.lr.toExponential(1)}  train loss ${l.train_loss.toFixed(4)}  ` +
      `val acc ${l.val_accuracy.toFixed(1)}%  best ${l.best_val_accuracy?.toFixed(1)}% @ ${l.best_epoch}`)
    .join("\n");
}

function drawRace() {
  const canvas = $("race");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  axes(ctx, w, h, pad);
  if (!history.length) return;
  const n = Math.max(history.length, 20);
  const x = (i) => pad + (i / (n - 1)) * (w - 2 * pad);
  const y = (v) => h - pad - (v / 100) * (h - 2 * pad);
  const maxLoss = Math.max(...history.flatMap((ls) => ls.map((l) => l.train_loss)));
  for (const lane of [0, 1]) {
    const name = history[0][lane].model;
    const xs = history.map((_, i) => x(i));
    polyline(ctx, xs, history.map((ls) => y(ls[lane].val_accuracy)), COLORS[name], false);
    polyline(ctx, xs, history.map((ls) => y((100 * ls[lane].train_loss) / maxLoss)), COLORS[name], true);
  }
}

function stop() {
  if (timer) clearInterval(timer);
  timer = null;
  $("run").textContent = "Run";
}

function toggleRun() {
  if (timer) return stop();
  if (!race) resetRace();
  timer = setInterval(stepRace, 30);
  $("run").textContent = "Pause";
}

function color(v) {
  const t = Math.max(-1, Math.min(1, v));
  const r = t > 0 ? 255 : Math.round(255 * (1 + t));
  const b = t < 0 ? 255 : Math.round(255 * (1 - t));
  const g = Math.round(255 * (1 - Math.abs(t)));
  return `rgb(${r},${g},${b})`;
}

function drawGates() {
  if (!race) resetRace();
  if (!race) return;
  const map = JSON.parse(race.gates(num("sample")));
  const canvas = $("gates");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const time = map.input[0].length;
  const cell = (w - 60) / time;
  const inputH = 110;
  const all = map.input.flat();
  const lo = Math.min(...all), hi = Math.max(...all);
  const palette = ["#333", "#888", "#27ae60"];
  map.input.forEach((row, c) => {
    const xs = row.map((_, t) => 60 + (t + 0.5) * cell);
    const ys = row.map((v) => 10 + (1 - (v - lo) / (hi - lo || 1)) * (inputH - 20));
    polyline(ctx, xs, ys, palette[c % palette.length], false);
  });
  ctx.fillStyle = "#333";
  ctx.fillText(`class ${map.label}`, 4, 20);
  const rowH = Math.min(40, (h - inputH - 10) / Math.max(1, map.gates.length));
  map.mean.forEach((row, r) => {
    ctx.fillStyle = "#333";
    ctx.fillText(`g${map.gates[r]}`, 4, inputH + r * rowH + rowH / 2 + 4);
    row.forEach((v, t) => {
      ctx.fillStyle = color(v);
      ctx.fillRect(60 + t * cell, inputH + r * rowH, Math.ceil(cell), rowH - 2);
    });
  });
}

await init();
$("status").textContent = "";
$("draw-lr").onclick = drawSchedule;
$("reset").onclick = resetRace;
$("step").onclick = stepRace;
$("run").onclick = toggleRun;
$("draw-gates").onclick = drawGates;
drawSchedule();
resetRace();

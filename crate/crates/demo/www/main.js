import init, { simulate_loops, align_toy, frequency_switch } from "./pkg/pabridge_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function lines(canvas, series, { ymin, ymax, label }) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 30;
  ctx.clearRect(0, 0, w, h);
  const all = series.flatMap((s) => s.values);
  const lo = ymin ?? Math.min(...all), hi = ymax ?? Math.max(...all);
  const n = Math.max(...series.map((s) => s.values.length));
  const x = (i) => pad + (i / Math.max(n - 1, 1)) * (w - 2 * pad);
  const y = (v) => h - pad - ((v - lo) / (hi - lo || 1)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.fillText(label, pad + 4, pad - 8);
  ctx.fillText(hi.toFixed(3), 0, pad + 4);
  ctx.fillText(lo.toFixed(3), 0, h - pad);
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.name, w - pad - 130, pad + 14 + 14 * k);
  });
}

function scatter(canvas, clouds) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, span = 6;
  ctx.clearRect(0, 0, w, h);
  const px = (v) => ((v + span) / (2 * span)) * w;
  const py = (v) => h - ((v + span) / (2 * span)) * h;
  for (const { points, color } of clouds) {
    ctx.fillStyle = color;
    for (const [a, b] of points) ctx.fillRect(px(a) - 1, py(b) - 1, 2, 2);
  }
}

function runLoop() {
  $("loop-out").textContent = "running...";
  setTimeout(() => {
    const t0 = performance.now();
    const r = JSON.parse(simulate_loops(num("loop-seed"), num("loop-rounds")));
    const pick = (rows, key) => rows.map((m) => m[key]);
    const both = (key) => [
      { name: "closed baseline", color: "#d33", values: pick(r.closed_baseline, key) },
      { name: "aligned + debiased", color: "#2a2", values: pick(r.pa_bridge, key) },
    ];
    lines($("loop-share"), both("top1pct_share"), { label: "exposure share of top 1% starters" });
    lines($("loop-unique"), both("unique_exposed"), { ymin: 0, label: "unique starters exposed per round" });
    const last = (rows) => rows[rows.length - 1];
    const b = last(r.closed_baseline), p = last(r.pa_bridge);
    $("loop-out").textContent =
      `final round: baseline ${b.unique_exposed} exposed, auc ${b.auc.toFixed(3)}; ` +
      `aligned ${p.unique_exposed} exposed, auc ${p.auc.toFixed(3)}  (${((performance.now() - t0) / 1000).toFixed(1)} s)`;
  }, 10);
}

function runAlign() {
  $("al-out").textContent = "training...";
  setTimeout(() => {
    const r = JSON.parse(align_toy(num("al-seed"), num("al-dx"), num("al-dy"), num("al-steps")));
    scatter($("al-plot"), [
      { points: r.starter, color: "rgba(51,102,204,.5)" },
      { points: r.active, color: "rgba(221,51,51,.4)" },
      { points: r.mapped, color: "rgba(34,170,34,.6)" },
    ]);
    $("al-out").textContent =
      `discriminator accuracy ${r.accuracy_before.toFixed(3)} -> ${r.accuracy_after.toFixed(3)}\n` +
      `MMD^2 ${r.mmd_before.toFixed(4)} -> ${r.mmd_after.toFixed(4)}`;
  }, 10);
}

function runFreq() {
  const r = JSON.parse(
    frequency_switch(1, num("fq-gamma"), num("fq-alpha"), num("fq-switch"), num("fq-draws")),
  );
  lines($("fq-plot"), [{ name: "total variation", color: "#36c", values: r.total_variation }], {
    ymin: 0,
    label: "TV(estimate, truth) after each draw",
  });
  const fmt = (v) => v.map((x) => x.toFixed(3)).join(" ");
  $("fq-out").textContent = `truth    ${fmt(r.truth_after)}\nestimate ${fmt(r.estimate_after)}`;
}

init().then(() => {
  $("status").textContent = "ready";
  $("loop-run").onclick = runLoop;
  $("al-run").onclick = runAlign;
  $("fq-run").onclick = runFreq;
  runFreq();
});

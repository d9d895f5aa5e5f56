import init, { explosionCurves, taylorResiduals, trainAndProbe } from "./pkg/resiter_demo.js";

const COLORS = ["#1f77b4", "#d62728", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b"];
const NS = "http://www.w3.org/2000/svg";

const num = (id) => Number(document.getElementById(id).value);

function el(name, attrs, parent) {
  const e = document.createElementNS(NS, name);
  for (const [k, v] of Object.entries(attrs)) e.setAttribute(k, v);
  if (parent) parent.appendChild(e);
  return e;
}

// Line chart of several series; `log` selects log10 axes.
function chart(series, { log = false, xlabel = "", ylabel = "" } = {}) {
  const W = 640, H = 300, L = 56, R = 12, T = 12, B = 40;
  const f = log ? Math.log10 : (v) => v;
  const pts = series.flatMap((s) => s.points).filter(([x, y]) => !log || (x > 0 && y > 0));
  const xs = pts.map(([x]) => f(x)), ys = pts.map(([, y]) => f(y));
  let [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  if (x0 === x1) x1 = x0 + 1;
  if (y0 === y1) y1 = y0 + 1;
  const px = (x) => L + ((f(x) - x0) / (x1 - x0)) * (W - L - R);
  const py = (y) => H - B - ((f(y) - y0) / (y1 - y0)) * (H - T - B);
  const svg = el("svg", { width: W, height: H, viewBox: `0 0 ${W} ${H}` });
  el("line", { x1: L, y1: H - B, x2: W - R, y2: H - B, stroke: "#888" }, svg);
  el("line", { x1: L, y1: T, x2: L, y2: H - B, stroke: "#888" }, svg);
  const tick = (v) => (log ? `1e${v.toFixed(1)}` : v.toPrecision(3));
  for (const [v, y] of [[y0, H - B], [y1, T + 10]]) {
    el("text", { x: 4, y, "font-size": 11 }, svg).textContent = tick(v);
  }
  for (const [v, x] of [[x0, L], [x1, W - R - 40]]) {
    el("text", { x, y: H - B + 14, "font-size": 11 }, svg).textContent = tick(v);
  }
  el("text", { x: W / 2, y: H - 6, "font-size": 12, "text-anchor": "middle" }, svg).textContent = xlabel;
  el("text", { x: 14, y: H / 2, "font-size": 12, transform: `rotate(-90 14 ${H / 2})`, "text-anchor": "middle" }, svg).textContent = ylabel;
  series.forEach((s, i) => {
    const p = s.points.filter(([x, y]) => !log || (x > 0 && y > 0));
    if (p.length === 0) return;
    el("polyline", {
      points: p.map(([x, y]) => `${px(x)},${py(y)}`).join(" "),
      fill: "none",
      stroke: s.color ?? COLORS[i % COLORS.length],
      "stroke-width": s.width ?? 1.8,
      "stroke-opacity": s.opacity ?? 1,
    }, svg);
  });
  return svg;
}

function legend(names) {
  const d = document.createElement("div");
  d.className = "legend";
  d.innerHTML = names.map((n, i) => `<span style="color:${COLORS[i % COLORS.length]}">&#9632; ${n}</span>`).join("");
  return d;
}

function table(head, rows) {
  const t = document.createElement("table");
  t.innerHTML = `<tr>${head.map((h) => `<th>${h}</th>`).join("")}</tr>` +
    rows.map((r) => `<tr>${r.map((c) => `<td>${c}</td>`).join("")}</tr>`).join("");
  return t;
}

function run(button, out, work) {
  const target = document.getElementById(out);
  document.getElementById(button).addEventListener("click", () => {
    target.textContent = "running...";
    // Yield so the status text paints before the synchronous call.
    setTimeout(() => {
      try {
        target.replaceChildren(...work());
      } catch (e) {
        target.innerHTML = `<p class="err">${e}</p>`;
      }
    }, 20);
  });
}

await init();

run("ex-run", "ex-out", () => {
  const r = JSON.parse(explosionCurves(num("ex-seed"), num("ex-blocks"), num("ex-from")));
  const series = r.curves.map((c) => ({ points: c.norms.map((v, i) => [i, v]) }));
  return [
    chart(series, { xlabel: "depth (block input, then head input)", ylabel: "mean ||h||" }),
    legend(r.curves.map((c) => c.name)),
    table(["model", "growth factor", "trainable parameters"],
      r.curves.map((c) => [c.name, c.growth_factor.toFixed(4), c.trainable])),
  ];
});

run("ty-run", "ty-out", () => {
  const r = JSON.parse(taylorResiduals(num("ty-seed"), num("ty-block")));
  const series = r.samples.map((s) => ({
    points: r.scales.map((x, i) => [x, s.residuals[i]]),
    color: s.kinked ? "#bbb" : COLORS[0],
    width: 1.2,
    opacity: 0.8,
  }));
  series.push({ points: r.scales.map((x) => [x, 1e-3 * x * x]), color: "#d62728", width: 2 });
  const smooth = r.samples.filter((s) => !s.kinked && s.slope !== null).map((s) => s.slope);
  const mean = smooth.reduce((a, b) => a + b, 0) / Math.max(smooth.length, 1);
  const p = document.createElement("p");
  p.textContent = `${smooth.length} of ${r.samples.length} samples keep their ReLU pattern; mean slope ${mean.toFixed(3)}.`;
  return [
    chart(series, { log: true, xlabel: "scale s", ylabel: "R(s)" }),
    legend(["kink-free sample", "reference slope 2"]),
    p,
  ];
});

run("tp-run", "tp-out", () => {
  const r = JSON.parse(trainAndProbe(num("tp-seed"), num("tp-epochs")));
  const acc = [
    { points: r.history.map((h) => [h.epoch, h.train_acc]) },
    { points: r.history.map((h) => [h.epoch, h.val_acc]) },
  ];
  const f = (v) => v.toFixed(4);
  return [
    chart(acc, { xlabel: "epoch", ylabel: "accuracy" }),
    legend(["train", "validation"]),
    table(["block", "cosine", "l2 ratio", "accuracy without block"],
      r.blocks.map((b) => [b.block, f(b.cosine), f(b.l2_ratio), f(b.drop_accuracy)])),
  ];
});

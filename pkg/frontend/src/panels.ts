/** The six workflow panels. All numeric content comes through numericSpan so
 * displayed values stay byte-equal to the service's response fields. */

import { numericSpan, show } from "./format.js";
import { renderDag, renderNodeInspector } from "./dag.js";
import type { WorkflowStore } from "./store.js";
import type { CatalogView, PlanPayload } from "./types.js";

const SVG_NS = "http://www.w3.org/2000/svg";

// --- panel 1: catalog + annotation with redaction preview ---------------------

export function renderCatalogPanel(doc: Document, catalog: CatalogView): HTMLElement {
  const root = doc.createElement("div");
  root.className = "catalog-view";
  for (const relation of catalog.relations) {
    const heading = doc.createElement("h4");
    heading.textContent = relation.name;
    heading.appendChild(doc.createTextNode(" "));
    const rows = numericSpan(doc, `relations.${relation.name}.row_count_estimate`,
                             relation.row_count_estimate);
    heading.appendChild(rows);
    heading.appendChild(doc.createTextNode(" rows"));
    root.appendChild(heading);

    const table = doc.createElement("table");
    const head = doc.createElement("tr");
    for (const col of ["attribute", "type", "sample values"]) {
      const th = doc.createElement("th");
      th.textContent = col;
      head.appendChild(th);
    }
    table.appendChild(head);
    for (const attr of relation.attributes) {
      const tr = doc.createElement("tr");
      tr.className = attr.redacted ? "attr redacted" : "attr";
      const name = doc.createElement("td");
      name.textContent = attr.name;
      const type = doc.createElement("td");
      type.textContent = attr.data_type;
      const samples = doc.createElement("td");
      samples.className = "samples";
      samples.textContent =
        typeof attr.samples === "string" ? attr.samples : attr.samples.map(show).join(", ");
      tr.append(name, type, samples);
      table.appendChild(tr);
    }
    root.appendChild(table);
  }
  return root;
}

// --- panel 2: query editor + DAG ----------------------------------------------

export function renderAnalysisPanel(doc: Document, store: WorkflowStore): HTMLElement {
  const root = doc.createElement("div");
  root.className = "analysis-view";
  if (!store.analysis) {
    root.textContent = "issue a query to see its plan";
    return root;
  }
  const inspectorHost = doc.createElement("div");
  inspectorHost.className = "inspector-host";
  const svg = renderDag(doc, store.analysis.ir, store.analysis.regions, (nodeId) => {
    inspectorHost.replaceChildren(renderNodeInspector(doc, store.analysis!.ir, nodeId));
  });
  root.appendChild(svg);
  root.appendChild(inspectorHost);

  const summary = doc.createElement("p");
  summary.className = "region-summary";
  summary.textContent = store.analysis.regions.length
    ? store.analysis.regions.map((r) => r.reason).join("; ")
    : "query touches no tainted data";
  root.appendChild(summary);
  return root;
}

// --- panel 3: parameter controls ------------------------------------------------

export interface ParameterControls {
  root: HTMLElement;
  read(): { max_epsilon?: number; min_accuracy?: number; max_latency_ms?: number; k?: number };
}

export function renderParameterPanel(doc: Document, isAdmin: boolean): ParameterControls {
  const root = doc.createElement("form");
  root.className = "parameters";

  const field = (label: string, name: string, input: HTMLInputElement) => {
    const wrap = doc.createElement("label");
    wrap.textContent = label + " ";
    input.name = name;
    wrap.appendChild(input);
    root.appendChild(wrap);
    return input;
  };

  const maxEps = doc.createElement("input");
  maxEps.type = "range";
  maxEps.min = "0.25";
  maxEps.max = "32";
  maxEps.step = "0.25";
  maxEps.value = "8";
  field("max ε", "max_epsilon", maxEps);

  const minAcc = doc.createElement("input");
  minAcc.type = "number";
  minAcc.min = "0";
  minAcc.max = "1";
  minAcc.step = "0.01";
  minAcc.value = "0";
  field("min accuracy", "min_accuracy", minAcc);

  const maxLat = doc.createElement("input");
  maxLat.type = "number";
  maxLat.min = "0";
  maxLat.value = "";
  field("max latency (ms)", "max_latency_ms", maxLat);

  const k = doc.createElement("input");
  k.type = "number";
  k.min = "1";
  k.value = "3";
  field("top k", "k", k);

  if (!isAdmin) {
    const note = doc.createElement("p");
    note.className = "admin-note";
    note.textContent = "scalarization weights are admin-tunable defaults";
    root.appendChild(note);
  }

  return {
    root,
    read() {
      const out: ReturnType<ParameterControls["read"]> = {};
      out.max_epsilon = Number(maxEps.value);
      if (Number(minAcc.value) > 0) out.min_accuracy = Number(minAcc.value);
      if (maxLat.value !== "") out.max_latency_ms = Number(maxLat.value);
      out.k = Number(k.value);
      return out;
    },
  };
}

// --- panel 4: top-k scheme cards + Pareto scatter -------------------------------

export function renderPlanCard(
  doc: Document,
  plan: PlanPayload,
  index: number,
  onPick: (planId: string) => void,
): HTMLElement {
  const card = doc.createElement("div");
  card.className = "plan-card";
  card.dataset.planId = plan.plan_id;

  const title = doc.createElement("h4");
  title.textContent = `#${index + 1} ${plan.rule_id}`;
  card.appendChild(title);

  const metrics = doc.createElement("p");
  metrics.className = "metrics";
  metrics.appendChild(doc.createTextNode("ε = "));
  metrics.appendChild(numericSpan(doc, `${plan.plan_id}.cost.epsilon`, plan.cost?.epsilon));
  metrics.appendChild(doc.createTextNode(" | predicted accuracy "));
  metrics.appendChild(
    numericSpan(doc, `${plan.plan_id}.cost.predicted_accuracy`, plan.cost?.predicted_accuracy),
  );
  metrics.appendChild(doc.createTextNode(" | latency (ms) "));
  metrics.appendChild(numericSpan(doc, `${plan.plan_id}.cost.latency_ms`, plan.cost?.latency_ms));
  card.appendChild(metrics);

  const why = doc.createElement("p");
  why.className = "explanation";
  why.textContent = plan.explanation + (plan.low_confidence ? " (prior estimate)" : "");
  card.appendChild(why);

  const pick = doc.createElement("button");
  pick.type = "button";
  pick.textContent = "select & run";
  pick.addEventListener("click", () => onPick(plan.plan_id));
  card.appendChild(pick);
  return card;
}

export function renderParetoScatter(doc: Document, frontier: PlanPayload[]): SVGSVGElement {
  const width = 360;
  const height = 220;
  const pad = 34;
  const svg = doc.createElementNS(SVG_NS, "svg") as SVGSVGElement;
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  svg.setAttribute("class", "pareto");

  const costs = frontier.filter((p) => p.cost);
  if (!costs.length) return svg;
  const epsMax = Math.max(...costs.map((p) => p.cost!.epsilon));
  const latMax = Math.max(1e-9, ...costs.map((p) => p.cost!.latency_ms));

  const axis = doc.createElementNS(SVG_NS, "path");
  axis.setAttribute(
    "d",
    `M ${pad} ${pad / 2} L ${pad} ${height - pad} L ${width - pad / 2} ${height - pad}`,
  );
  axis.setAttribute("class", "axis");
  svg.appendChild(axis);

  for (const plan of costs) {
    const cost = plan.cost!;
    const x = pad + (cost.epsilon / Math.max(epsMax, 1e-9)) * (width - 1.5 * pad);
    const y = height - pad - cost.predicted_accuracy * (height - 1.5 * pad);
    const r = 4 + 8 * (cost.latency_ms / latMax); // point size encodes latency
    const dot = doc.createElementNS(SVG_NS, "circle");
    dot.setAttribute("cx", String(x));
    dot.setAttribute("cy", String(y));
    dot.setAttribute("r", String(r));
    dot.setAttribute("class", "pareto-point");
    dot.setAttribute("data-plan-id", plan.plan_id);
    const tooltip = doc.createElementNS(SVG_NS, "title");
    tooltip.textContent =
      `${plan.plan_id}: eps=${show(cost.epsilon)}, ` +
      `acc=${show(cost.predicted_accuracy)}, latency=${show(cost.latency_ms)}ms`;
    dot.appendChild(tooltip);
    svg.appendChild(dot);
  }
  return svg;
}

// --- panel 5: selected-scheme detail ---------------------------------------------

export function renderSchemeDetail(doc: Document, store: WorkflowStore): HTMLElement {
  const root = doc.createElement("div");
  root.className = "scheme-detail";
  const plan = store.selected;
  if (!plan || !store.selection) {
    root.textContent = "no scheme selected";
    return root;
  }
  const title = doc.createElement("h4");
  title.textContent = plan.plan_id;
  root.appendChild(title);

  const list = doc.createElement("dl");
  const entry = (term: string, value: Node | string) => {
    const dt = doc.createElement("dt");
    dt.textContent = term;
    const dd = doc.createElement("dd");
    if (typeof value === "string") dd.textContent = value;
    else dd.appendChild(value);
    list.append(dt, dd);
  };

  if (store.selection.model_id) {
    entry("model path", `registry://${store.selection.model_id}`);
  }
  if (store.selection.store_id) {
    entry("noisy store", store.selection.store_id);
  }
  if (plan.training_request) {
    const req = plan.training_request;
    entry("architecture", req.search
      ? "searched (differentiable architecture search)"
      : `hidden layers [${req.hidden.join(", ")}]`);
    const hyper = doc.createElement("span");
    for (const [key, value] of Object.entries(req.dpsgd)) {
      hyper.appendChild(doc.createTextNode(`${key}=`));
      hyper.appendChild(numericSpan(doc, `${plan.plan_id}.training_request.dpsgd.${key}`, value));
      hyper.appendChild(doc.createTextNode(" "));
    }
    entry("hyper-parameters", hyper);
    entry("task", `${req.task} on ${req.relation}(${req.input_attrs.join(", ")})`);
  } else if (plan.model) {
    const eps = numericSpan(doc, `${plan.plan_id}.model.epsilon_spent`, plan.model.epsilon_spent);
    const wrap = doc.createElement("span");
    wrap.appendChild(doc.createTextNode("pre-trained, ε spent "));
    wrap.appendChild(eps);
    entry("provenance", wrap);
  }
  root.appendChild(list);
  return root;
}

// --- panel 6: results + receipt + feedback ----------------------------------------

export function renderResultsPanel(doc: Document, store: WorkflowStore): HTMLElement {
  const root = doc.createElement("div");
  root.className = "results-view";
  const result = store.result;
  if (!result) {
    root.textContent = "execute a plan to see results";
    return root;
  }

  const table = doc.createElement("table");
  table.className = "result-rows";
  const head = doc.createElement("tr");
  for (const col of result.schema) {
    const th = doc.createElement("th");
    th.textContent = col.name;
    head.appendChild(th);
  }
  table.appendChild(head);
  for (const row of result.rows) {
    const tr = doc.createElement("tr");
    for (const value of row) {
      const td = doc.createElement("td");
      td.textContent = show(value);
      tr.appendChild(td);
    }
    table.appendChild(tr);
  }
  root.appendChild(table);

  const receipt = doc.createElement("p");
  receipt.className = "receipt";
  receipt.appendChild(doc.createTextNode("ε charged "));
  receipt.appendChild(numericSpan(doc, "receipt.epsilon_charged", result.receipt.epsilon_charged));
  receipt.appendChild(doc.createTextNode(" | wall latency (ms) "));
  receipt.appendChild(numericSpan(doc, "receipt.wall_latency_ms", result.receipt.wall_latency_ms));
  receipt.appendChild(doc.createTextNode(" | rows "));
  receipt.appendChild(numericSpan(doc, "receipt.rows_out", result.receipt.rows_out));
  root.appendChild(receipt);

  if (store.budget) {
    const meter = doc.createElement("p");
    meter.className = "budget-meter";
    meter.appendChild(doc.createTextNode(`dataset ${store.budget.dataset.name}: ε left `));
    meter.appendChild(
      numericSpan(doc, "budget.dataset.epsilon_remaining", store.budget.dataset.epsilon_remaining),
    );
    meter.appendChild(doc.createTextNode(` | user ${store.budget.user.name}: ε left `));
    meter.appendChild(
      numericSpan(doc, "budget.user.epsilon_remaining", store.budget.user.epsilon_remaining),
    );
    root.appendChild(meter);
  }
  return root;
}

export interface FeedbackForm {
  root: HTMLElement;
  submit(): Promise<void>;
}

export function renderFeedbackForm(doc: Document, store: WorkflowStore): FeedbackForm {
  const root = doc.createElement("form");
  root.className = "feedback-form";
  const accuracy = doc.createElement("input");
  accuracy.type = "number";
  accuracy.min = "0";
  accuracy.max = "1";
  accuracy.step = "0.01";
  accuracy.name = "accuracy";
  const label = doc.createElement("label");
  label.textContent = "observed accuracy ";
  label.appendChild(accuracy);
  root.appendChild(label);
  const send = doc.createElement("button");
  send.type = "button";
  send.textContent = "send feedback";
  root.appendChild(send);

  const submit = async () => {
    const value = accuracy.value === "" ? null : Number(accuracy.value);
    const latency = store.result ? store.result.receipt.wall_latency_ms : null;
    await store.feedback(value, latency);
  };
  send.addEventListener("click", () => void submit());
  return { root, submit };
}

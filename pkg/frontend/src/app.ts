/** Wires the six panels to the workflow store. One session per tab. */

import { ServiceClient } from "./api.js";
import { WorkflowStore } from "./store.js";
import {
  renderAnalysisPanel,
  renderCatalogPanel,
  renderFeedbackForm,
  renderParameterPanel,
  renderPlanCard,
  renderParetoScatter,
  renderResultsPanel,
  renderSchemeDetail,
} from "./panels.js";

interface AppConfig {
  base: string;
  user: string;
  role: string;
  dataset: string;
  defaultQuery: string;
}

export function mountApp(doc: Document, config: AppConfig): WorkflowStore {
  const client = new ServiceClient(config.base);
  const store = new WorkflowStore(client, config);
  const $ = (id: string) => doc.getElementById(id)!;

  const controls = renderParameterPanel(doc, config.role === "admin");
  $("panel-parameters").appendChild(controls.root);

  const toast = (message: string, kind: string) => {
    const box = $("toast");
    box.textContent = message;
    box.className = `toast ${kind}`;
    setTimeout(() => (box.className = "toast hidden"), 6000);
  };

  store.onChange((event) => {
    if (event.kind === "budget-error") {
      toast(`privacy budget exhausted: ${event.message}`, "budget");
      return;
    }
    if (event.kind === "error") {
      toast(event.message ?? "request failed", "error");
      return;
    }
    redraw();
  });

  const refreshCatalog = async () => {
    const role = ($("preview-role") as HTMLSelectElement).value || config.role;
    const catalog = await client.describeCatalog(role);
    $("panel-catalog-view").replaceChildren(renderCatalogPanel(doc, catalog));
  };

  const redraw = () => {
    for (const [panel, id] of [
      [3, "panel-parameters"],
      [4, "panel-plans"],
      [5, "panel-scheme"],
      [6, "panel-results"],
    ] as const) {
      $(id).classList.toggle("disabled", !store.panelEnabled(panel));
    }
    $("panel-dag").replaceChildren(renderAnalysisPanel(doc, store));
    const plansHost = $("panel-plan-cards");
    plansHost.replaceChildren();
    if (store.recommendation) {
      store.recommendation.top_k.forEach((plan, i) => {
        plansHost.appendChild(
          renderPlanCard(doc, plan, i, (planId) => void pickAndRun(planId)),
        );
      });
      $("panel-pareto").replaceChildren(
        renderParetoScatter(doc, store.recommendation.frontier),
      );
    }
    $("panel-scheme").replaceChildren(renderSchemeDetail(doc, store));
    const results = $("panel-results-view");
    results.replaceChildren(renderResultsPanel(doc, store));
    if (store.stage === "executed") {
      results.appendChild(renderFeedbackForm(doc, store).root);
    }
  };

  const pickAndRun = async (planId: string) => {
    await store.select(planId);
    await store.execute();
  };

  $("annotate-button").addEventListener("click", () => {
    void (async () => {
      const relation = ($("annotate-relation") as HTMLInputElement).value;
      const attrs = ($("annotate-attributes") as HTMLInputElement).value
        .split(",")
        .map((name) => name.trim())
        .filter(Boolean);
      await client.annotate({ relation, attributes: attrs });
      await refreshCatalog();
    })().catch((error) => toast(String(error), "error"));
  });

  $("preview-role").addEventListener("change", () => {
    void refreshCatalog().catch((error) => toast(String(error), "error"));
  });

  $("analyze-button").addEventListener("click", () => {
    const sql = ($("sql-editor") as HTMLTextAreaElement).value;
    void store
      .analyze(sql)
      .then(() => store.recommend(controls.read()))
      .catch(() => undefined);
  });

  ($("sql-editor") as HTMLTextAreaElement).value = config.defaultQuery;
  void refreshCatalog().catch(() => undefined);
  redraw();
  return store;
}

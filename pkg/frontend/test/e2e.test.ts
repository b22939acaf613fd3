/** A10: scripted browser-style test against a live service on the
 * elderly-care fixture. Drives annotate -> analyze (green highlights present)
 * -> recommend -> select -> execute -> feedback through the same store and
 * renderers the app mounts, and checks every displayed numeric byte-equal to
 * its API field. */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { ServiceClient } from "../src/api";
import { WorkflowStore } from "../src/store";
import { renderDag } from "../src/dag";
import {
  renderPlanCard,
  renderParetoScatter,
  renderResultsPanel,
  renderSchemeDetail,
  renderFeedbackForm,
  renderCatalogPanel,
} from "../src/panels";

const PORT = 18431;
const BASE = `http://127.0.0.1:${PORT}`;
const SQL =
  "SELECT MRI_Images FROM Central_Hospital_Organization WHERE " +
  "Nurse_Location = 'Elderly Care-1' AND Alzheimer_Patient_Name = 'Patient 06' " +
  "AND Alzheimer_Patient_Age = '81'";

let service: ChildProcess;

async function waitForService(): Promise<void> {
  const deadline = Date.now() + 60_000;
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${BASE}/catalog?role=nurse`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 300));
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  const dataDir = mkdtempSync(join(tmpdir(), "dpquery-ui-e2e-"));
  service = spawn(
    "python3",
    [
      "-m", "dpquery.cli",
      "--data-dir", dataDir,
      "--scenario", "alzheimers_care",
      "serve",
      "--addr", `127.0.0.1:${PORT}`,
    ],
    { stdio: "ignore" },
  );
  await waitForService();
});

afterAll(() => {
  service?.kill("SIGTERM");
});

/** Resolve a ".num" span's data-field path against the recorded responses. */
function lookup(recorded: Record<string, unknown>, path: string): unknown {
  const parts = path.split(".");
  let cursor: unknown = recorded;
  for (const part of parts) {
    if (cursor === undefined || cursor === null) return undefined;
    cursor = (cursor as Record<string, unknown>)[part];
  }
  return cursor;
}

function checkNumericSpans(root: ParentNode, recorded: Record<string, unknown>): number {
  const spans = [...root.querySelectorAll("span.num")] as HTMLElement[];
  let checked = 0;
  for (const span of spans) {
    const value = lookup(recorded, span.dataset.field!);
    if (value === undefined) continue;
    expect(span.textContent, span.dataset.field).toBe(String(value));
    checked += 1;
  }
  return checked;
}

describe("elderly-care workflow against a live service", () => {
  it("completes annotate -> analyze -> recommend -> select -> execute -> feedback", async () => {
    const client = new ServiceClient(BASE);
    const store = new WorkflowStore(client, {
      user: "nurse_jane",
      role: "nurse",
      dataset: "Central_Hospital_Organization",
    });

    // step 1: the owner annotates; the nurse-facing schema is redacted
    const annotated = await client.annotate({
      relation: "Central_Hospital_Organization",
      attributes: ["Alzheimer_Patient_Name", "Alzheimer_Patient_Age"],
      params: { nurse: 1.0 },
    });
    expect(annotated.version).toBeGreaterThanOrEqual(0);
    const catalog = await client.describeCatalog("nurse");
    const catalogPanel = renderCatalogPanel(document, catalog);
    const redacted = [...catalogPanel.querySelectorAll("tr.redacted")];
    expect(redacted.length).toBeGreaterThanOrEqual(3);
    expect(catalogPanel.textContent).not.toContain("Patient 06");
    const catalogRecord = {
      relations: Object.fromEntries(catalog.relations.map((r) => [r.name, r])),
    };
    expect(checkNumericSpans(catalogPanel, catalogRecord)).toBeGreaterThan(0);

    // step 2: analyze; sensitive subquery highlighted in green boxes
    const analysis = await store.analyze(SQL);
    expect(analysis.regions).toHaveLength(1);
    const dag = renderDag(document, analysis.ir, analysis.regions, () => undefined);
    const highlighted = [...dag.querySelectorAll("g.dag-node.region rect")];
    expect(highlighted.length).toBe(analysis.regions[0].member_nodes.length);
    for (const rect of highlighted) {
      expect(rect.getAttribute("fill")).toBe("palegreen");
    }

    // steps 3-4: recommend under default parameters; cards show wire values
    const recommendation = await store.recommend();
    expect(recommendation.top_k.length).toBeGreaterThan(0);
    const recorded: Record<string, unknown> = {};
    for (const plan of recommendation.top_k) recorded[plan.plan_id] = plan;
    let checkedNumerics = 0;
    recommendation.top_k.forEach((plan, i) => {
      const card = renderPlanCard(document, plan, i, () => undefined);
      checkedNumerics += checkNumericSpans(card, recorded);
    });
    expect(checkedNumerics).toBeGreaterThanOrEqual(3 * recommendation.top_k.length);
    const scatter = renderParetoScatter(document, recommendation.frontier);
    expect(scatter.querySelectorAll("circle.pareto-point").length).toBe(
      recommendation.frontier.length,
    );

    // step 4b: select the top recommendation (trains the model synchronously)
    const top = recommendation.top_k[0];
    const selection = await store.select(top.plan_id);
    expect(selection.model_id).toBeTruthy();
    const detail = renderSchemeDetail(document, store);
    expect(detail.textContent).toContain(`registry://${selection.model_id}`);
    checkNumericSpans(detail, recorded);

    // step 5: execute; results, receipt and budget meter show wire values
    const result = await store.execute();
    expect(result.schema.map((c) => c.name)).toEqual(["MRI_Images"]);
    expect(result.rows).toHaveLength(1);
    expect(String(result.rows[0][0])).toMatch(/^mri-scan-/);
    expect(result.receipt.epsilon_charged).toBeCloseTo(top.cost!.epsilon, 9);

    const resultsPanel = renderResultsPanel(document, store);
    const receiptRecord = { receipt: result.receipt, budget: store.budget };
    expect(checkNumericSpans(resultsPanel, receiptRecord)).toBeGreaterThanOrEqual(5);
    expect(resultsPanel.textContent).toContain(String(result.receipt.epsilon_charged));

    // budget meter reflects the debit
    const budget = await client.budget("nurse_jane", "Central_Hospital_Organization");
    expect(budget.dataset.epsilon_remaining).toBeCloseTo(
      budget.dataset.epsilon_initial - result.receipt.epsilon_charged,
      9,
    );

    // step 6: feedback
    const form = renderFeedbackForm(document, store);
    (form.root.querySelector("input[name=accuracy]") as HTMLInputElement).value = "1.0";
    await form.submit();

    // panel enablement followed the state machine the whole way
    expect(store.stage).toBe("executed");
    expect(store.panelEnabled(6)).toBe(true);
  });

  it("surfaces workflow-order errors distinctly (409)", async () => {
    const client = new ServiceClient(BASE);
    const store = new WorkflowStore(client, {
      user: "nurse_jane",
      role: "nurse",
      dataset: "Central_Hospital_Organization",
    });
    await store.analyze(SQL);
    let event = "";
    store.onChange((e) => (event = e.kind));
    await expect(store.execute()).rejects.toMatchObject({ status: 409 });
    expect(event).toBe("error");
  });
});

/** Session workflow state: one store per browser tab, mirroring the service's
 * state machine. Budget-mutating calls are pessimistic (no optimistic UI):
 * panels update only from confirmed server responses. */

import { ApiError, ServiceClient } from "./api.js";
import type {
  AnalyzeResponse,
  BudgetResponse,
  Constraints,
  ExecuteResponse,
  PlanPayload,
  RecommendResponse,
  SelectResponse,
} from "./types.js";

export type Stage = "idle" | "analyzed" | "recommended" | "selected" | "executed";

export interface StoreEvent {
  kind: "update" | "error" | "budget-error";
  message?: string;
}

export class WorkflowStore {
  stage: Stage = "idle";
  user: string;
  role: string;
  dataset: string;
  analysis: AnalyzeResponse | null = null;
  recommendation: RecommendResponse | null = null;
  selected: PlanPayload | null = null;
  selection: SelectResponse | null = null;
  result: ExecuteResponse | null = null;
  budget: BudgetResponse | null = null;
  lastError: string | null = null;
  private listeners: ((event: StoreEvent) => void)[] = [];

  constructor(
    public client: ServiceClient,
    options: { user: string; role: string; dataset: string },
  ) {
    this.user = options.user;
    this.role = options.role;
    this.dataset = options.dataset;
  }

  onChange(listener: (event: StoreEvent) => void): void {
    this.listeners.push(listener);
  }

  private emit(event: StoreEvent): void {
    for (const listener of this.listeners) listener(event);
  }

  /** Panel enablement follows the session state machine. */
  panelEnabled(panel: 1 | 2 | 3 | 4 | 5 | 6): boolean {
    switch (panel) {
      case 1:
      case 2:
        return true; // annotation is global; the editor starts a session
      case 3:
      case 4:
        return this.stage !== "idle";
      case 5:
        return this.stage === "selected" || this.stage === "executed";
      case 6:
        return this.stage === "executed";
    }
  }

  private fail(error: unknown): never {
    if (error instanceof ApiError) {
      this.lastError = `${error.body.code}: ${error.body.message}`;
      this.emit({
        kind: error.isBudgetError ? "budget-error" : "error",
        message: this.lastError,
      });
    } else {
      this.lastError = String(error);
      this.emit({ kind: "error", message: this.lastError });
    }
    throw error;
  }

  async analyze(sql: string): Promise<AnalyzeResponse> {
    try {
      this.analysis = await this.client.analyze(sql, this.user, this.role);
      this.recommendation = null;
      this.selected = null;
      this.selection = null;
      this.result = null;
      this.stage = "analyzed";
      this.lastError = null;
      this.emit({ kind: "update" });
      return this.analysis;
    } catch (error) {
      this.fail(error);
    }
  }

  async recommend(constraints?: Constraints): Promise<RecommendResponse> {
    if (!this.analysis) throw new Error("analyze first");
    try {
      this.recommendation = await this.client.recommend(
        this.analysis.session_id,
        constraints,
      );
      if (this.stage === "analyzed") this.stage = "recommended";
      this.emit({ kind: "update" });
      return this.recommendation;
    } catch (error) {
      this.fail(error);
    }
  }

  /** Selecting a scheme card pins the plan and materializes its model. */
  async select(planId: string): Promise<SelectResponse> {
    if (!this.analysis || !this.recommendation) throw new Error("recommend first");
    try {
      this.selection = await this.client.select(this.analysis.session_id, planId);
      this.selected =
        this.recommendation.top_k.find((p) => p.plan_id === planId) ??
        this.recommendation.frontier.find((p) => p.plan_id === planId) ??
        null;
      this.stage = "selected";
      this.emit({ kind: "update" });
      return this.selection;
    } catch (error) {
      this.fail(error);
    }
  }

  async execute(): Promise<ExecuteResponse> {
    if (!this.analysis) throw new Error("select first");
    try {
      this.result = await this.client.execute(this.analysis.session_id);
      this.stage = "executed";
      await this.refreshBudget();
      this.emit({ kind: "update" });
      return this.result;
    } catch (error) {
      this.fail(error);
    }
  }

  async feedback(accuracy: number | null, latencyMs: number | null): Promise<void> {
    if (!this.selected) throw new Error("nothing executed");
    try {
      await this.client.feedback(this.selected.plan_id, latencyMs, accuracy);
      this.emit({ kind: "update" });
    } catch (error) {
      this.fail(error);
    }
  }

  async refreshBudget(): Promise<void> {
    this.budget = await this.client.budget(this.user, this.dataset);
  }
}

/** Thin fetch client over the workflow service; no computation, no caching. */

import type {
  AnalyzeResponse,
  ApiErrorBody,
  BudgetResponse,
  CatalogView,
  Constraints,
  ExecuteResponse,
  RecommendResponse,
  SelectResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: ApiErrorBody,
  ) {
    super(`${body.code}: ${body.message}`);
  }

  get isBudgetError(): boolean {
    return this.status === 402;
  }

  get isWorkflowOrderError(): boolean {
    return this.status === 409;
  }
}

async function request<T>(base: string, method: string, path: string, body?: unknown): Promise<T> {
  const response = await fetch(base + path, {
    method,
    headers: body === undefined ? {} : { "Content-Type": "application/json" },
    body: body === undefined ? undefined : JSON.stringify(body),
  });
  const payload = await response.json();
  if (!response.ok) {
    throw new ApiError(response.status, payload as ApiErrorBody);
  }
  return payload as T;
}

export class ServiceClient {
  constructor(public base: string) {}

  annotate(body: {
    relation: string;
    attributes: string[];
    params?: Record<string, number>;
    tuple_predicate?: string;
    expected_version?: number;
  }): Promise<{ changed: boolean; version: number }> {
    return request(this.base, "POST", "/catalog/annotate", body);
  }

  describeCatalog(role: string): Promise<CatalogView> {
    return request(this.base, "GET", `/catalog?role=${encodeURIComponent(role)}`);
  }

  analyze(sql: string, user: string, role: string): Promise<AnalyzeResponse> {
    return request(this.base, "POST", "/query/analyze", { sql, user, role });
  }

  recommend(session: string, constraints?: Constraints): Promise<RecommendResponse> {
    const body: Record<string, unknown> = { session };
    if (constraints) body.constraints = constraints;
    return request(this.base, "POST", "/plans/recommend", body);
  }

  select(session: string, planId: string): Promise<SelectResponse> {
    return request(this.base, "POST", "/plans/select", { session, plan_id: planId });
  }

  execute(session: string): Promise<ExecuteResponse> {
    return request(this.base, "POST", "/execute", { session });
  }

  feedback(planId: string, latencyMs: number | null, accuracy: number | null): Promise<{ ok: boolean }> {
    return request(this.base, "POST", "/feedback", {
      plan_id: planId,
      latency_ms: latencyMs,
      accuracy,
    });
  }

  budget(user: string, dataset: string): Promise<BudgetResponse> {
    return request(
      this.base,
      "GET",
      `/budget?user=${encodeURIComponent(user)}&dataset=${encodeURIComponent(dataset)}`,
    );
  }
}

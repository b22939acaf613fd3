/** Wire types mirroring the service's JSON payloads, field for field. */

export interface AttributeView {
  name: string;
  data_type: string;
  redacted: boolean;
  samples: unknown[] | string; // "REDACTED" for tainted attributes
}

export interface RelationView {
  name: string;
  row_count_estimate: number;
  attributes: AttributeView[];
}

export interface CatalogView {
  role: string;
  relations: RelationView[];
}

export interface IrNodePayload {
  id: number;
  kind: string;
  label: string;
  children: number[];
}

export interface IrEdgePayload {
  producer: number;
  schema: { name: string; data_type: string }[];
  taint: string[];
  relation_tainted: boolean;
  cardinality: number;
  payload_kind: string;
}

export interface IrPayload {
  sink: number;
  nodes: IrNodePayload[];
  edges: IrEdgePayload[];
}

export interface RegionPayload {
  root: number;
  member_nodes: number[];
  tainted_inputs: string[];
  reason: string;
}

export interface AnalyzeResponse {
  session_id: string;
  sql: string;
  ir: IrPayload;
  dot: string;
  regions: RegionPayload[];
}

export interface CostPayload {
  epsilon: number;
  acc_drop: number;
  latency_ms: number;
  predicted_accuracy: number;
}

export interface TrainingRequestPayload {
  kind: string;
  relation: string;
  input_attrs: string[];
  label_attr: string | null;
  task: string;
  family: string;
  hidden: number[];
  search: boolean;
  dpsgd: Record<string, number>;
}

export interface PlanPayload {
  plan_id: string;
  rule_id: string;
  epsilon: number;
  fingerprint: string;
  explanation: string;
  low_confidence: boolean;
  cost?: CostPayload;
  model?: { model_id: string; epsilon_spent: number };
  training_request?: TrainingRequestPayload;
  region: RegionPayload | null;
}

export interface RecommendResponse {
  top_k: PlanPayload[];
  chosen: PlanPayload[];
  frontier: PlanPayload[];
  dropped: { rule_id: string; region_root: number; reason: string }[];
}

export interface SelectResponse {
  plan_id: string;
  model_id: string | null;
  store_id: string | null;
}

export interface MechanismTraceEntry {
  node: number;
  mechanism: string;
  params: Record<string, unknown>;
  epsilon: number;
}

export interface ReceiptPayload {
  plan_id: string;
  epsilon_charged: number;
  wall_latency_ms: number;
  rows_out: number;
  mechanism_trace: MechanismTraceEntry[];
}

export interface ExecuteResponse {
  schema: { name: string; data_type: string }[];
  rows: unknown[][];
  receipt: ReceiptPayload;
}

export interface BudgetSide {
  name: string;
  epsilon_remaining: number;
  epsilon_initial: number;
  delta: number;
}

export interface BudgetResponse {
  dataset: BudgetSide;
  user: BudgetSide;
}

export interface ApiErrorBody {
  code: string;
  message: string;
  detail?: string | null;
  line?: number;
  col?: number;
}

export interface Constraints {
  max_epsilon?: number;
  min_accuracy?: number;
  max_latency_ms?: number;
  weights?: [number, number, number];
  k?: number;
}

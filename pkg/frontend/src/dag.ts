/** Interactive SVG rendering of the operator DAG with sensitive-region
 * highlighting and a click-to-inspect side panel. */

import { layoutDag } from "./layout.js";
import { show } from "./format.js";
import type { IrPayload, RegionPayload } from "./types.js";

const SVG_NS = "http://www.w3.org/2000/svg";
export const HIGHLIGHT_FILL = "palegreen";

export function regionNodeIds(regions: RegionPayload[]): Set<number> {
  const ids = new Set<number>();
  for (const region of regions) {
    for (const id of region.member_nodes) ids.add(id);
  }
  return ids;
}

export function renderDag(
  doc: Document,
  ir: IrPayload,
  regions: RegionPayload[],
  onSelect: (nodeId: number) => void,
): SVGSVGElement {
  const { boxes, edges, width, height } = layoutDag(ir);
  const highlighted = regionNodeIds(regions);
  const byId = new Map(ir.nodes.map((n) => [n.id, n]));

  const svg = doc.createElementNS(SVG_NS, "svg") as SVGSVGElement;
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  svg.setAttribute("width", String(width));
  svg.setAttribute("class", "dag");

  for (const edge of edges) {
    const line = doc.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", String(edge.x1));
    line.setAttribute("y1", String(edge.y1));
    line.setAttribute("x2", String(edge.x2));
    line.setAttribute("y2", String(edge.y2));
    line.setAttribute("class", "dag-edge");
    svg.appendChild(line);
  }

  for (const box of boxes) {
    const node = byId.get(box.id)!;
    const group = doc.createElementNS(SVG_NS, "g");
    group.setAttribute("class", highlighted.has(box.id) ? "dag-node region" : "dag-node");
    group.setAttribute("data-node-id", String(box.id));

    const rect = doc.createElementNS(SVG_NS, "rect");
    rect.setAttribute("x", String(box.x));
    rect.setAttribute("y", String(box.y));
    rect.setAttribute("width", String(box.width));
    rect.setAttribute("height", String(box.height));
    rect.setAttribute("rx", "6");
    if (highlighted.has(box.id)) {
      rect.setAttribute("fill", HIGHLIGHT_FILL);
    }
    group.appendChild(rect);

    const title = doc.createElementNS(SVG_NS, "text");
    title.setAttribute("x", String(box.x + box.width / 2));
    title.setAttribute("y", String(box.y + 19));
    title.setAttribute("text-anchor", "middle");
    title.textContent = `${node.id}: ${node.kind}`;
    group.appendChild(title);

    const detail = doc.createElementNS(SVG_NS, "text");
    detail.setAttribute("x", String(box.x + box.width / 2));
    detail.setAttribute("y", String(box.y + 36));
    detail.setAttribute("text-anchor", "middle");
    detail.setAttribute("class", "dag-label");
    const label = node.label.length > 26 ? node.label.slice(0, 25) + "…" : node.label;
    detail.textContent = label;
    group.appendChild(detail);

    group.addEventListener("click", () => onSelect(box.id));
    svg.appendChild(group);
  }
  return svg;
}

export function renderNodeInspector(doc: Document, ir: IrPayload, nodeId: number): HTMLElement {
  const node = ir.nodes.find((n) => n.id === nodeId);
  const edge = ir.edges.find((e) => e.producer === nodeId);
  const panel = doc.createElement("div");
  panel.className = "inspector";
  if (!node || !edge) {
    panel.textContent = "no such node";
    return panel;
  }
  const title = doc.createElement("h4");
  title.textContent = `${node.kind} #${node.id}`;
  panel.appendChild(title);

  const op = doc.createElement("p");
  op.textContent = node.label;
  panel.appendChild(op);

  const schema = doc.createElement("p");
  schema.className = "inspector-schema";
  schema.textContent =
    "schema: " + edge.schema.map((a) => `${a.name}:${a.data_type}`).join(", ");
  panel.appendChild(schema);

  const taint = doc.createElement("p");
  taint.className = "inspector-taint";
  taint.textContent =
    edge.taint.length || edge.relation_tainted
      ? `taint: {${edge.taint.join(", ")}}` +
        (edge.relation_tainted ? " + row-level" : "")
      : "taint: none";
  panel.appendChild(taint);

  const cardinality = doc.createElement("p");
  cardinality.textContent = `rows (est.): ${show(edge.cardinality)}`;
  panel.appendChild(cardinality);
  return panel;
}

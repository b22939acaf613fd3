/** Layered (Sugiyama-style) layout for the operator DAG.
 *
 * Layers come from longest-path rank over the child->parent direction, so
 * scans sit at the bottom and the sink on top; within a layer nodes are
 * ordered by the median position of their children to keep edges short.
 */

import type { IrPayload } from "./types.js";

export interface NodeBox {
  id: number;
  x: number;
  y: number;
  width: number;
  height: number;
  layer: number;
}

export interface EdgeLine {
  from: number;
  to: number;
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

export const BOX = { width: 190, height: 46, hGap: 36, vGap: 46, padding: 24 };

export function layerOf(ir: IrPayload): Map<number, number> {
  const layer = new Map<number, number>();
  const byId = new Map(ir.nodes.map((n) => [n.id, n]));

  const rank = (id: number): number => {
    const cached = layer.get(id);
    if (cached !== undefined) return cached;
    const node = byId.get(id);
    if (!node || node.children.length === 0) {
      layer.set(id, 0);
      return 0;
    }
    const value = 1 + Math.max(...node.children.map(rank));
    layer.set(id, value);
    return value;
  };

  for (const node of ir.nodes) rank(node.id);
  return layer;
}

export function layoutDag(ir: IrPayload): { boxes: NodeBox[]; edges: EdgeLine[]; width: number; height: number } {
  const layer = layerOf(ir);
  const maxLayer = Math.max(0, ...layer.values());

  const layers = new Map<number, number[]>();
  for (const node of ir.nodes) {
    const l = layer.get(node.id) ?? 0;
    if (!layers.has(l)) layers.set(l, []);
    layers.get(l)!.push(node.id);
  }

  // order within a layer by the median x-order of children (barycenter pass)
  const order = new Map<number, number>();
  for (let l = 0; l <= maxLayer; l++) {
    const ids = layers.get(l) ?? [];
    const byId = new Map(ir.nodes.map((n) => [n.id, n]));
    const key = (id: number): number => {
      const kids = byId.get(id)?.children ?? [];
      if (kids.length === 0) return order.get(id) ?? id;
      const positions = kids.map((k) => order.get(k) ?? 0);
      positions.sort((a, b) => a - b);
      return positions[Math.floor(positions.length / 2)];
    };
    ids.sort((a, b) => key(a) - key(b) || a - b);
    ids.forEach((id, i) => order.set(id, i));
    layers.set(l, ids);
  }

  const widest = Math.max(...[...layers.values()].map((ids) => ids.length));
  const width = BOX.padding * 2 + widest * BOX.width + (widest - 1) * BOX.hGap;
  const height = BOX.padding * 2 + (maxLayer + 1) * BOX.height + maxLayer * BOX.vGap;

  const boxes: NodeBox[] = [];
  const at = new Map<number, NodeBox>();
  for (let l = 0; l <= maxLayer; l++) {
    const ids = layers.get(l) ?? [];
    const rowWidth = ids.length * BOX.width + (ids.length - 1) * BOX.hGap;
    const x0 = (width - rowWidth) / 2;
    // sink on top: invert the vertical axis
    const y = BOX.padding + (maxLayer - l) * (BOX.height + BOX.vGap);
    ids.forEach((id, i) => {
      const box = {
        id,
        x: x0 + i * (BOX.width + BOX.hGap),
        y,
        width: BOX.width,
        height: BOX.height,
        layer: l,
      };
      boxes.push(box);
      at.set(id, box);
    });
  }

  const edges: EdgeLine[] = [];
  for (const node of ir.nodes) {
    const parent = at.get(node.id)!;
    for (const child of node.children) {
      const kid = at.get(child)!;
      edges.push({
        from: child,
        to: node.id,
        x1: kid.x + kid.width / 2,
        y1: kid.y,
        x2: parent.x + parent.width / 2,
        y2: parent.y + parent.height,
      });
    }
  }
  return { boxes, edges, width, height };
}

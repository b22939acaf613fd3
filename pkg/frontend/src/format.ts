/** Verbatim value display.
 *
 * The UI performs no privacy computation: every epsilon/accuracy/latency it
 * shows is String(field) for a field that came off the wire, tagged with a
 * data-field path so contract tests can check byte equality.
 */

export function show(value: unknown): string {
  if (value === null || value === undefined) return "";
  return String(value);
}

export function numericSpan(doc: Document, fieldPath: string, value: unknown): HTMLElement {
  const span = doc.createElement("span");
  span.className = "num";
  span.dataset.field = fieldPath;
  span.textContent = show(value);
  return span;
}

// Pure list-reorder helpers backing the drag-and-drop UIs.

export function moveItem<T>(items: T[], fromIndex: number, toIndex: number): T[] {
  if (
    fromIndex < 0 ||
    fromIndex >= items.length ||
    toIndex < 0 ||
    toIndex > items.length
  ) {
    throw new RangeError(`cannot move ${fromIndex} -> ${toIndex} in list of ${items.length}`);
  }
  const copy = items.slice();
  const [moved] = copy.splice(fromIndex, 1);
  const insertAt = toIndex > fromIndex ? toIndex - 1 : toIndex;
  copy.splice(insertAt, 0, moved);
  return copy;
}

/** Reorder flow steps by display position and reassign dense `order`
 * fields (the service validates order as a permutation of 0..n-1). */
export function reorderFlowSteps<T extends { order: number }>(
  steps: T[],
  fromIndex: number,
  toIndex: number,
): T[] {
  const sorted = steps.slice().sort((a, b) => a.order - b.order);
  const moved = moveItem(sorted, fromIndex, toIndex);
  return moved.map((step, index) => ({ ...step, order: index }));
}

/** The permutation sending current question positions to new ones after a
 * drag, expressed as "new list = [old[i] for i in permutation]". */
export function dragPermutation(length: number, fromIndex: number, toIndex: number): number[] {
  return moveItem(
    Array.from({ length }, (_, i) => i),
    fromIndex,
    toIndex,
  );
}

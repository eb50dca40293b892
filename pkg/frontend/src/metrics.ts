/** Segmentation metrics used during validation. */

/** Dice-Sorensen coefficient of one class on integer label grids.
 * Both-empty regions score 1, matching the engine's convention. */
export function dice(pred: ArrayLike<number>, gt: ArrayLike<number>, classId: number): number {
  if (pred.length !== gt.length) {
    throw new Error(`mask length mismatch: ${pred.length} vs ${gt.length}`);
  }
  let p = 0;
  let g = 0;
  let both = 0;
  for (let i = 0; i < pred.length; i++) {
    const inP = pred[i] === classId;
    const inG = gt[i] === classId;
    if (inP) p++;
    if (inG) g++;
    if (inP && inG) both++;
  }
  if (p === 0 && g === 0) return 1.0;
  return (2 * both) / (p + g);
}

/** Per-pixel argmax over the class axis of (H*W, classes) probabilities. */
export function argmaxLabels(probs: Float32Array, pixels: number, classes: number): Uint8Array {
  const out = new Uint8Array(pixels);
  for (let i = 0; i < pixels; i++) {
    let best = 0;
    let bestVal = probs[i * classes];
    for (let c = 1; c < classes; c++) {
      const v = probs[i * classes + c];
      if (v > bestVal) {
        bestVal = v;
        best = c;
      }
    }
    out[i] = best;
  }
  return out;
}

"""Walkthrough: the semantic memory bank.

Seeds per-class prototypes from text embeddings, soft-assigns activated
tokens, and watches the momentum update converge under a replayed token set.
"""

import numpy as np

from spotlighter import assign_tokens, init_bank, local_loss, match_class, momentum_update
from spotlighter.numerics import normalize_rows
from spotlighter.rng import Stream

d, C, K = 64, 6, 5
stream = Stream(7)
text = normalize_rows(stream.normals(C, d))

bank = init_bank(text, K, "text", sigma=0.05, seed=7, beta=0.8)
print(f"bank: {C} classes x {K} prototypes x {d} dims "
      f"({bank.prototypes.astype(np.float32).nbytes // C} bytes/category as f32)")

query = text[3] + 0.05 * stream.normals(d)
print("match_class on a jittered class-3 text vector ->", match_class(query, bank))

# tokens near class 2: a strong cluster plus background
tokens = np.vstack([
    normalize_rows(text[2] + 0.1 * stream.normals(6, d)),
    normalize_rows(stream.normals(10, d)),
])
assignment = assign_tokens(tokens, bank.prototypes[2], temperature=0.01)
print("\nassignment row sums:", np.round(assignment.D.sum(axis=1), 9)[:4], "...")
print("bucket sizes:", np.bincount(assignment.hard, minlength=K))

print("\nreplaying the same tokens: prototype displacement per update")
disp0 = None
for it in range(12):
    prev = bank.prototypes[2].copy()
    assignment = assign_tokens(tokens, bank.prototypes[2], 0.01)
    bank = momentum_update(bank, 2, assignment, tokens)
    disp = float(np.linalg.norm(bank.prototypes[2] - prev))
    disp0 = disp0 or disp
    print(f"  update {it:2d}: |dU| = {disp:.2e}  ({disp / disp0:.4f} of first)")

print("\nlocal alignment loss for the true class:",
      round(local_loss(bank, tokens, 2, 0.01), 6))
print("local alignment loss for a wrong class:",
      round(local_loss(bank, tokens, 5, 0.01), 4))

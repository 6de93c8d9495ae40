"""Walk through the symmetries of a TAPE stack with random weights.

Run: python demos/symmetries.py
"""
import numpy as np

from tape import equivariance as eqv
from tape.model import ModelConfig, TapeModel, block_logits, rope_attention_baseline
from tape.numcore import Rng, random_orthogonal
from tape.numcore.tensor import as_tensor
from tape.posenc import RopeSchedule, rope_init

cfg = ModelConfig(dim=16, heads=2, depth=2, vocab=8, n_ctx=64)
params = eqv.random_layer_params(cfg, Rng(1))
model = TapeModel(cfg, params)
layer = eqv.tape_stack(cfg, params)

print("1. Reorder tokens (and conjugate the mask): outputs reorder the same way.")
print("  ", eqv.check_perm_equivariance(layer, 20, rng=Rng(2)))

print("2. Rotate every PE slice by one orthogonal matrix O: features unchanged, PE rotated by O.")
print("  ", eqv.check_ortho_equivariance(layer, 20, rng=Rng(3)))

print("3. Feed the raw PE into the features instead: the rotation symmetry breaks.")
print("  ", eqv.check_ortho_equivariance(eqv.flattened_pe_stack(cfg, params, Rng(4)), 20, rng=Rng(3)))

print("4. Shift every position id by the same amount: logits do not move.")
rep = eqv.check_shift_invariance(model, rng=Rng(5))
for d, dev in rep.logit_dev.items():
    print(f"   delta={d:>3}: max logit change {dev:.1e}")
print(f"   prepending 3 BOS tokens instead changes logits by {rep.bos_logit_dev:.3f}")

print("5. With rotary initial PE and no contextualization, block logits are rotary attention.")
sched = RopeSchedule(cfg.blocks, cfg.head_dim)
rng = Rng(6)
X, wq, wk = rng.normal((7, 16)), rng.normal((16, 16)), rng.normal((16, 16))
pos = np.arange(7.0)
E = rope_init(pos, cfg.heads, sched).values
a = block_logits(as_tensor((X @ wq)[None]), as_tensor((X @ wk)[None]), E[None], cfg).data[0].sum(-1)
b = rope_attention_baseline(X, None, wq, wk, sched, cfg.heads, pos)
print(f"   max difference from the complex-number rotary route: {np.abs(a - b).max():.1e}")

print("6. The PE dot products of the initial encoding depend only on i - j.")
gram = np.einsum("imlr,jmlr->ij", E[:, 0], E[:, 0])
print("   first row:", np.round(gram[0], 3))
print("   second row:", np.round(gram[1], 3))
O = random_orthogonal(2, rng)
print(f"   after a global rotation the grams change by {np.abs(np.einsum('imlr,jmlr->ij', E[:, 0] @ O, E[:, 0] @ O) - gram).max():.1e}")

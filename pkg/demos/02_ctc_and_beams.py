"""CTC loss against brute force, and what beam search does with width."""

import numpy as np

from masknet.autodiff import Tensor
from masknet.decoding import beam_decode, greedy_decode, prefix_scores_exhaustive
from masknet.losses import ctc_brute_oracle, ctc_loss

rng = np.random.default_rng(0)


def normalize(x):
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


lp = normalize(rng.standard_normal((4, 3)))  # T=4 frames, 2 symbols + blank (last)
for target in [(), (0,), (0, 1), (1, 1)]:
    print(target, float(ctc_loss(Tensor(lp), target).data), ctc_brute_oracle(lp, target))
# too many tokens for the frames: infinite loss, zero gradient
print("infeasible:", float(ctc_loss(Tensor(lp[:1]), (0, 1)).data))

# greedy takes the best frame path; wide beams find the best prefix
lp = normalize(rng.standard_normal((6, 4)) * 2)
exact = prefix_scores_exhaustive(lp)
best = max(exact, key=exact.get)
print("greedy", greedy_decode(lp), "width 1", beam_decode(lp, 1).tokens)
print("width 512", beam_decode(lp, 512), "exhaustive best", best, exact[best])

# more width is not always better: pruning at width 3 throws away a state
# that width 2 keeps
lp = normalize(np.array([[-0.9, -0.5, -0.8], [-1.4, 0.6, -1.1]]))
for w in (1, 2, 3, 4):
    print("width", w, beam_decode(lp, w))

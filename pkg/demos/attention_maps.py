"""Walk through plain attention and attention-in-attention on a toy instance.

    python demos/attention_maps.py

Prints the attention weights of one query under both variants and shows that
zeroing the inner value path brings back the plain weights exactly.
"""

import numpy as np

from cathseg import autograd as ag
from cathseg.attention import (AttentionWeights, InnerAttentionWeights, aia_attention, attention_map,
                               dot_product_attention)
from cathseg.autograd import Tensor


def softmax(m):
    e = np.exp(m - m.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def main():
    rng = np.random.default_rng(0)
    with ag.precision("float64"):
        # five query tokens attend to seven key tokens, 8 channels split over 4 heads
        q, k, v = (Tensor(rng.normal(size=(n, 8))) for n in (5, 7, 7))
        w = AttentionWeights(8, 4, rng)
        inner = InnerAttentionWeights(5, 16, 4, rng)
        for wo in inner.wo:  # a fresh module starts with a zero output projection
            wo.data[:] = rng.normal(0, 0.5, size=wo.shape)

        m = attention_map(q, k, w).data
        print("raw correlation map, head 0 (queries x keys):")
        print(np.round(m[0], 3))
        print("\nplain attention weights of query 0, head 0:", np.round(softmax(m[0])[0], 3))

        plain, _ = dot_product_attention(q, k, v, w)
        refined, _ = aia_attention(q, k, v, w, inner)
        print("output change from the inner refinement (max abs):", float(np.abs(refined.data - plain.data).max()))

        inner.zero_value_path()
        degenerate, _ = aia_attention(q, k, v, w, inner)
        print("with the inner value path zeroed, outputs identical:",
              degenerate.data.tobytes() == plain.data.tobytes())


if __name__ == "__main__":
    main()

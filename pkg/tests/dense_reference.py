"""Straight numpy re-implementation of full-frame label propagation.

Shares no code with the package beyond reading its frames: its own memory
schedule, dense L2 similarities, top-k selection, softmax, weighted sum and
argmax merge.
"""
import numpy as np


def dense_labels(frames, k=20, interval=3, chunk=512):
    H, W, C = frames[0].grid.keys.shape
    first = frames[0].labels
    ids = sorted(int(o) for o in np.unique(first) if o != 0)

    def one_hot(lab):
        flat = lab.reshape(-1)
        out = np.zeros((flat.size, len(ids) + 1))
        out[:, 0] = flat == 0
        for ch, o in enumerate(ids, 1):
            out[:, ch] = flat == o
        return out

    mem_k = [frames[0].grid.keys.reshape(-1, C)]
    mem_v = [one_hot(first)]
    outputs = [first.copy()]
    for t in range(1, len(frames)):
        K = np.concatenate(mem_k)
        V = np.concatenate(mem_v)
        kk = min(k, len(K))
        Q = frames[t].grid.keys.reshape(-1, C)
        out = np.empty((len(Q), V.shape[1]))
        k2 = (K * K).sum(axis=1)
        for s in range(0, len(Q), chunk):
            q = Q[s:s + chunk]
            # 2 q.k - |q|^2 - |k|^2, in place
            S = q @ K.T
            S *= 2.0
            S -= (q * q).sum(axis=1)[:, None]
            S -= k2
            top = np.argpartition(S, len(K) - kk, axis=1)[:, len(K) - kk:]
            st = np.take_along_axis(S, top, axis=1)
            e = np.exp(st - st.max(axis=1, keepdims=True))
            w = e / e.sum(axis=1, keepdims=True)
            out[s:s + chunk] = np.einsum("rk,rkc->rc", w, V[top])
        obj = out[:, 1:]
        bg = 1.0 - obj.max(axis=1)
        choice = np.argmax(np.column_stack([bg, obj]), axis=1)
        lab = np.array([0] + ids)[choice].reshape(H, W)
        outputs.append(lab)
        if t % interval == 0:
            mem_k.append(Q)
            mem_v.append(one_hot(lab))
    return outputs

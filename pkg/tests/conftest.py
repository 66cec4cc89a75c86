import math

import numpy as np

from discrilab import autodiff as ad
from discrilab import policy as pol
from discrilab.world import PERIOD_ID


def enumerate_captions(n_emittable, max_len):
    """Every token sequence the generator can produce under the length cap.

    Sequences end at the first terminal (PERIOD) or at the cap, exactly like
    the decode loop, so their probabilities sum to 1.
    """
    tokens = [i + 2 for i in range(n_emittable)]
    seqs = []

    def extend(prefix):
        for t in tokens:
            seq = prefix + (t,)
            if t == PERIOD_ID or len(seq) == max_len:
                seqs.append(seq)
            else:
                extend(seq)

    extend(())
    return seqs


def random_policy_params(vocab_size, image_dim, embed_dim, hidden_dim, seed,
                         scale=0.5):
    """Well-conditioned random weights for gradient checks.

    init_policy's small-uniform init leaves some coordinates so weakly
    coupled that their true gradients sink below finite-difference noise;
    drawing every tensor uniform in [-scale, scale] keeps all gradient
    paths measurable without changing what is being verified.
    """
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    d, h, v = embed_dim, hidden_dim, vocab_size
    return pol.PolicyParams(
        token_embedding=u(v, d), prefix_projection=u(image_dim, d),
        w_xz=u(d, h), w_hz=u(h, h), b_z=u(h),
        w_xr=u(d, h), w_hr=u(h, h), b_r=u(h),
        w_xn=u(d, h), w_hn=u(h, h), b_n=u(h),
        out_w=u(h, v), out_b=u(v))


def expected_reward_gradient(params, emb, reward, n_emittable=4, horizon=2):
    """d E[R] / d theta via autodiff of sum_c exp(log P(c)) * R(c).

    This exponential-of-log-prob route never touches the REINFORCE
    estimator, so it is an independent oracle for the identity test.
    """
    names = params.field_names()
    tape = ad.Tape()
    run = pol.PolicyRun(tape, params.leaves(tape))
    total = None
    for seq in enumerate_captions(n_emittable, horizon):
        term = ad.scale(ad.exp(pol.caption_logprob(run, emb, seq)), reward(seq))
        total = term if total is None else ad.add(total, term)
    ad.backward(tape, total)
    return {n: run.p[n].grad.copy() for n in names}, float(total.data)


def estimator_expectation(params, emb, reward, baseline_value,
                          n_emittable=4, horizon=2):
    """sum_c P(c) * grad[-(R(c) - b) log P(c)] with per-c baseline values."""
    names = params.field_names()
    acc = {n: np.zeros_like(getattr(params, n)) for n in names}
    for seq in enumerate_captions(n_emittable, horizon):
        tape = ad.Tape()
        run = pol.PolicyRun(tape, params.leaves(tape))
        lp = pol.caption_logprob(run, emb, seq)
        p_c = math.exp(float(lp.data))
        loss = ad.scale(lp, -(reward(seq) - baseline_value(seq)))
        ad.backward(tape, loss)
        for n in names:
            acc[n] += p_c * run.p[n].grad
    return acc

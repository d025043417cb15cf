"""Attention encoder-decoder over grammar actions, in numpy with manual backprop.

The encoder is a bidirectional LSTM (each direction ``hidden_dim // 2``).
The decoder LSTM consumes the embedding of the previous action; its hidden
state attends over the encoder outputs (dot product) and the combined
state ``s_t = tanh(W_c [h_t; o_t])`` scores actions against their
embeddings.  The softmax runs only over the actions applicable at the
current frontier.  With ``dar_enabled`` a per-task gated adapter rewrites
``h_t`` before attention.

Every scalar belongs to one partition: ``"g"`` (shared) or ``("s", task)``.
Action-embedding rows carry their own tags; all other tensors are tagged
as a whole.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyUtterance, NoApplicableActions, ParseTimeout
from .grammar import APPLY, Action, ActionRegistry, actions_to_lf, frontier_trace, lf_to_actions

PAD, UNK = "<pad>", "<unk>"
SHARED = "g"
CHECKPOINT_VERSION = 1


def task_tag(task):
    return ("s", task)


@dataclass
class ParserConfig:
    word_emb_dim: int = 64
    hidden_dim: int = 64
    action_emb_dim: int = 32
    dar_enabled: bool = False
    rng_seed: int = 0
    init_scale: float = 0.1
    max_steps: int = 200

    def __post_init__(self):
        for name in ("word_emb_dim", "hidden_dim", "action_emb_dim", "max_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (split across two encoder directions)")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_exact(x):
    # used only where an infinite logit must give an exact 0/1 gate
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


class ParserParams:
    """Named float64 tensors plus the partition registry."""

    def __init__(self, config):
        self.config = config
        self.rng = np.random.default_rng(config.rng_seed)
        self.tensors = {}
        self.tags = {}
        self.action_tags = []
        self.word_index = {PAD: 0, UNK: 1}
        self.words = [PAD, UNK]
        self.registry = ActionRegistry()
        self.tasks = []
        c = config
        h = c.hidden_dim // 2
        self._new("word_emb", (2, c.word_emb_dim))
        self._new("enc_f_W", (4 * h, c.word_emb_dim + h))
        self._new("enc_f_b", (4 * h,), zero=True)
        self._new("enc_b_W", (4 * h, c.word_emb_dim + h))
        self._new("enc_b_b", (4 * h,), zero=True)
        self._new("dec_W", (4 * c.hidden_dim, c.action_emb_dim + c.hidden_dim))
        self._new("dec_b", (4 * c.hidden_dim,), zero=True)
        self._new("start_emb", (c.action_emb_dim,))
        self._new("W_c", (c.action_emb_dim, 2 * c.hidden_dim))
        self._new("action_emb", (0, c.action_emb_dim))
        self.tensors["word_emb"][0] = 0.0

    def _init(self, shape):
        s = self.config.init_scale
        return self.rng.uniform(-s, s, size=shape)

    def _new(self, name, shape, tag=SHARED, zero=False):
        self.tensors[name] = np.zeros(shape) if zero else self._init(shape)
        self.tags[name] = tag

    # -- growth ----------------------------------------------------------
    def add_words(self, words):
        new = sorted(w for w in set(words) if w not in self.word_index)
        if not new:
            return
        for w in new:
            self.word_index[w] = len(self.words)
            self.words.append(w)
        rows = self._init((len(new), self.config.word_emb_dim))
        self.tensors["word_emb"] = np.concatenate([self.tensors["word_emb"], rows])

    def add_actions(self, actions, tags):
        fresh = []
        for a, tag in zip(actions, tags):
            if a not in self.registry:
                self.registry.register(a)
                self.action_tags.append(tag)
                fresh.append(a)
        if fresh:
            rows = self._init((len(fresh), self.config.action_emb_dim))
            self.tensors["action_emb"] = np.concatenate([self.tensors["action_emb"], rows])

    def set_action_tag(self, action, tag):
        self.action_tags[self.registry.id(action)] = tag

    def add_task(self, task):
        if task in self.tasks:
            return
        self.tasks.append(task)
        if self.config.dar_enabled:
            d = self.config.hidden_dim
            self._new(f"dar_phi/{task}", (d, d), tag=task_tag(task))
            self._new(f"dar_gate/{task}", (d, 2 * d), tag=task_tag(task))

    # -- partitions -------------------------------------------------------
    def partition_of(self, name, index=None):
        """Partition tag of a scalar given its tensor name and flat index."""
        if name == "action_emb":
            row = int(index) // self.config.action_emb_dim
            return self.action_tags[row]
        return self.tags[name]

    def mask_for(self, tags, action_rows=None):
        """Trainable mask: tensor name -> None (all rows) or an array of row ids.

        ``tags`` selects whole tensors and action-embedding rows by partition;
        ``action_rows`` (optional) further restricts action-embedding rows.
        """
        tags = set(tags)
        mask = {}
        for name, tag in self.tags.items():
            if name == "action_emb":
                continue
            if tag in tags:
                mask[name] = None
        rows = [i for i, t in enumerate(self.action_tags) if t in tags]
        if action_rows is not None:
            keep = set(int(r) for r in action_rows)
            rows = [r for r in rows if r in keep]
        if rows:
            mask["action_emb"] = np.asarray(rows, dtype=np.int64)
        return mask

    def action_row_mask(self, action_rows):
        rows = np.asarray(sorted(set(int(r) for r in action_rows)), dtype=np.int64)
        return {"action_emb": rows} if len(rows) else {}

    def all_tags(self):
        return set(self.tags.values()) | set(self.action_tags)

    def dar_param_count(self, task):
        if not self.config.dar_enabled:
            return 0
        return self.tensors[f"dar_phi/{task}"].size + self.tensors[f"dar_gate/{task}"].size

    # -- utilities -----------------------------------------------------
    def copy_tensors(self):
        return {k: v.copy() for k, v in self.tensors.items()}

    def flat(self):
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)])

    def word_ids(self, tokens):
        return [self.word_index.get(t, 1) for t in tokens]

    @property
    def num_actions(self):
        return len(self.registry)


class ActionScope:
    """Applicable-action masks for every frontier symbol of a grammar."""

    def __init__(self, grammar, params):
        self.grammar = grammar
        self.params = params
        reg = params.registry
        n = len(reg)
        symbols = sorted(grammar.nonterminals) + sorted(grammar.leaf_vocab)
        self.symbol_index = {s: i for i, s in enumerate(symbols)}
        self.masks = np.zeros((len(symbols), n), dtype=bool)
        for s, i in self.symbol_index.items():
            ids = [reg.id(a) for a in grammar.actions_for(s)]
            self.masks[i, ids] = True
        # frontier symbols pushed by each action, in stack order (top last)
        self.pushes = [()] * n
        self.action_ok = np.zeros(n, dtype=bool)
        for aid in range(n):
            a = reg[aid]
            if a.kind == APPLY:
                rule = grammar.rules_by_text.get(a.rule)
                if rule is None:
                    continue
                self.pushes[aid] = tuple(reversed(grammar.holes(rule.template)))
                self.action_ok[aid] = True
            else:
                self.action_ok[aid] = a.token in grammar.leaf_vocab.get(a.slot, ())

    def mask(self, symbol):
        return self.masks[self.symbol_index[symbol]]


@dataclass
class Encoded:
    """Tensorised training example."""

    task: object
    tokens: tuple
    lf: str
    actions: tuple
    frontier: tuple


def encode_example(utterance, lf, grammar, params, task):
    tokens = tuple(utterance.split()) if isinstance(utterance, str) else tuple(utterance)
    seq = lf_to_actions(lf, grammar)
    ids = tuple(params.registry.id(a) for a in seq)
    return Encoded(task, tokens, str(lf), ids, tuple(frontier_trace(seq, grammar)))


# ---------------------------------------------------------------------------
# LSTM pieces


def _lstm_step(x, h, c, W, b):
    H = h.shape[1]
    xh = np.concatenate([x, h], axis=1)
    z = xh @ W.T + b
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    return h2, c2, (xh, i, f, g, o, c, tc)


def _lstm_step_back(dh2, dc2, cache, W, dW, db, x_dim):
    xh, i, f, g, o, c, tc = cache
    do = dh2 * tc
    dc2 = dc2 + dh2 * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc2 * g * i * (1.0 - i),
        dc2 * c * f * (1.0 - f),
        dc2 * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)
    dW += dz.T @ xh
    db += dz.sum(axis=0)
    dxh = dz @ W
    return dxh[:, :x_dim], dxh[:, x_dim:], dc2 * f


def _pad(seqs, fill=0):
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for b, s in enumerate(seqs):
        out[b, :len(s)] = s
        mask[b, :len(s)] = 1.0
    return out, mask


def _masked_softmax(scores, mask):
    """Softmax over entries where mask is true; others get probability 0."""
    neg = np.where(mask, scores, -np.inf)
    top = neg.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(neg - top), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


class Parser:
    """Forward/backward passes, decoding and parameter bookkeeping."""

    def __init__(self, params):
        self.params = params
        self.config = params.config

    # -- encoder ---------------------------------------------------------
    def _encode(self, word_ids):
        P = self.params.tensors
        X, xmask = _pad(word_ids)
        B, n = X.shape
        h = self.config.hidden_dim // 2
        emb = P["word_emb"][X]
        caches_f, caches_b = [], []
        Hf = np.zeros((B, n, h))
        Hb = np.zeros((B, n, h))
        hf = np.zeros((B, h)); cf = np.zeros((B, h))
        for t in range(n):
            m = xmask[:, t:t + 1]
            h2, c2, cache = _lstm_step(emb[:, t], hf, cf, P["enc_f_W"], P["enc_f_b"])
            hf = m * h2 + (1 - m) * hf
            cf = m * c2 + (1 - m) * cf
            Hf[:, t] = hf
            caches_f.append(cache)
        hb = np.zeros((B, h)); cb = np.zeros((B, h))
        for t in range(n - 1, -1, -1):
            m = xmask[:, t:t + 1]
            h2, c2, cache = _lstm_step(emb[:, t], hb, cb, P["enc_b_W"], P["enc_b_b"])
            hb = m * h2 + (1 - m) * hb
            cb = m * c2 + (1 - m) * cb
            Hb[:, t] = hb
            caches_b.append(cache)
        E = np.concatenate([Hf, Hb], axis=2)
        h0 = np.concatenate([hf, hb], axis=1)
        c0 = np.concatenate([cf, cb], axis=1)
        enc = dict(X=X, xmask=xmask, caches_f=caches_f, caches_b=caches_b)
        return E, xmask, h0, c0, enc

    def _encode_back(self, enc, dE, dh0, dc0, grads):
        P = self.params.tensors
        X, xmask = enc["X"], enc["xmask"]
        B, n = X.shape
        h = self.config.hidden_dim // 2
        xd = self.config.word_emb_dim
        demb = np.zeros((B, n, xd))
        dWf = grads["enc_f_W"]; dbf = grads["enc_f_b"]
        dWb = grads["enc_b_W"]; dbb = grads["enc_b_b"]
        # backward direction ran t = n-1 .. 0; undo from t = 0 upward
        dh = dh0[:, h:].copy(); dc = dc0[:, h:].copy()
        for step, t in enumerate(range(n)):
            cache = enc["caches_b"][n - 1 - step]
            m = xmask[:, t:t + 1]
            dh = dh + dE[:, t, h:]
            dx, dh_prev, dc_prev = _lstm_step_back(m * dh, m * dc, cache, P["enc_b_W"], dWb, dbb, xd)
            demb[:, t] += dx
            dh = dh_prev + (1 - m) * dh
            dc = dc_prev + (1 - m) * dc
        dh = dh0[:, :h].copy(); dc = dc0[:, :h].copy()
        for t in range(n - 1, -1, -1):
            m = xmask[:, t:t + 1]
            dh = dh + dE[:, t, :h]
            dx, dh_prev, dc_prev = _lstm_step_back(m * dh, m * dc, enc["caches_f"][t], P["enc_f_W"], dWf, dbf, xd)
            demb[:, t] += dx
            dh = dh_prev + (1 - m) * dh
            dc = dc_prev + (1 - m) * dc
        np.add.at(grads["word_emb"], X, demb)

    def encode(self, tokens, task=None):
        """Contextual vectors (n, d) for one utterance."""
        if not tokens:
            raise EmptyUtterance("utterance has no tokens")
        E, _, _, _, _ = self._encode([self.params.word_ids(tokens)])
        return E[0]

    def features(self, utterances):
        """Mean-pooled encoder outputs, one row per utterance."""
        out = []
        for start in range(0, len(utterances), 64):
            chunk = [self.params.word_ids(u) for u in utterances[start:start + 64]]
            E, xmask, _, _, _ = self._encode(chunk)
            out.append((E * xmask[:, :, None]).sum(1) / xmask.sum(1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.config.hidden_dim))

    # -- decoder step --------------------------------------------------------
    def _adapt(self, h, tasks, gate_override=None):
        if not self.config.dar_enabled:
            return h, None
        P = self.params.tensors
        Wphi = np.stack([P[f"dar_phi/{t}"] for t in tasks])
        Wg = np.stack([P[f"dar_gate/{t}"] for t in tasks])
        phi = np.tanh(np.einsum("bij,bj->bi", Wphi, h))
        ph = np.concatenate([phi, h], axis=1)
        zg = np.einsum("bij,bj->bi", Wg, ph)
        if gate_override is not None:
            zg = np.full_like(zg, gate_override)
            gate = _sigmoid_exact(zg)
        else:
            gate = _sigmoid(zg)
        hh = gate * phi + (1.0 - gate) * h
        return hh, (h, phi, ph, gate, Wphi, Wg)

    def _adapt_back(self, dhh, cache, tasks, grads):
        h, phi, ph, gate, Wphi, Wg = cache
        d = h.shape[1]
        dgate = dhh * (phi - h)
        dphi = dhh * gate
        dh = dhh * (1.0 - gate)
        dzg = dgate * gate * (1.0 - gate)
        dph = np.einsum("bi,bij->bj", dzg, Wg)
        dphi = dphi + dph[:, :d]
        dh = dh + dph[:, d:]
        dzphi = dphi * (1.0 - phi * phi)
        dh = dh + np.einsum("bi,bij->bj", dzphi, Wphi)
        for b, t in enumerate(tasks):
            grads[f"dar_gate/{t}"] += np.outer(dzg[b], ph[b])
            grads[f"dar_phi/{t}"] += np.outer(dzphi[b], h[b])
        return dh

    def _attend(self, hh, E, xmask):
        scores = np.einsum("bnd,bd->bn", E, hh)
        alpha = _masked_softmax(scores, xmask > 0)
        o = np.einsum("bn,bnd->bd", alpha, E)
        return o, alpha

    def _decode_step(self, x, h, c, E, xmask, tasks, gate_override=None):
        P = self.params.tensors
        h2, c2, lcache = _lstm_step(x, h, c, P["dec_W"], P["dec_b"])
        hh, acache = self._adapt(h2, tasks, gate_override)
        o, alpha = self._attend(hh, E, xmask)
        ho = np.concatenate([hh, o], axis=1)
        s = np.tanh(ho @ P["W_c"].T)
        logits = s @ P["action_emb"].T
        return h2, c2, logits, (lcache, acache, hh, alpha, ho, s)

    # -- training loss -----------------------------------------------------
    def loss_and_grad(self, batch, scope, need_grad=True, gate_override=None, return_probs=False):
        """Mean sequence NLL over ``batch`` (list of :class:`Encoded`) and its gradient."""
        P = self.params.tensors
        cfg = self.config
        B = len(batch)
        tasks = [ex.task for ex in batch]
        for ex in batch:
            if not ex.tokens:
                raise EmptyUtterance("utterance has no tokens")
        E, xmask, h, c, enc = self._encode([self.params.word_ids(ex.tokens) for ex in batch])
        gold, ymask = _pad([ex.actions for ex in batch])
        T = gold.shape[1]
        sym = np.zeros((B, T), dtype=np.int64)
        for b, ex in enumerate(batch):
            sym[b, :len(ex.frontier)] = [scope.symbol_index[s] for s in ex.frontier]
        rows = np.arange(B)
        loss = 0.0
        probs = np.zeros((B, T))
        steps = []
        h0, c0 = h, c
        for t in range(T):
            x = np.broadcast_to(P["start_emb"], (B, cfg.action_emb_dim)) if t == 0 else P["action_emb"][gold[:, t - 1]]
            h, c, logits, cache = self._decode_step(x, h, c, E, xmask, tasks, gate_override)
            amask = scope.masks[sym[:, t]]
            valid = ymask[:, t] > 0
            if not amask[valid].any(axis=1).all():
                raise NoApplicableActions(f"no applicable actions at step {t}")
            amask = amask | ~valid[:, None]
            p = _masked_softmax(logits, amask)
            pg = p[rows, gold[:, t]]
            probs[:, t] = np.where(valid, pg, 0.0)
            with np.errstate(divide="ignore"):
                loss -= np.sum(np.where(valid, np.log(pg), 0.0))
            steps.append((cache, p))
        loss /= B
        if return_probs:
            probs_out = [probs[b, :len(ex.actions)].copy() for b, ex in enumerate(batch)]
        if not need_grad:
            return (loss, probs_out) if return_probs else (loss, None)

        grads = {k: np.zeros_like(v) for k, v in P.items()}
        dE = np.zeros_like(E)
        dh_next = np.zeros_like(h)
        dc_next = np.zeros_like(c)
        d = cfg.hidden_dim
        for t in range(T - 1, -1, -1):
            (lcache, acache, hh, alpha, ho, s), p = steps[t]
            dlogits = p.copy()
            dlogits[rows, gold[:, t]] -= 1.0
            dlogits *= ymask[:, t:t + 1] / B
            grads["action_emb"] += dlogits.T @ s
            ds = dlogits @ P["action_emb"]
            dpre = ds * (1.0 - s * s)
            grads["W_c"] += dpre.T @ ho
            dho = dpre @ P["W_c"]
            dhh, do = dho[:, :d], dho[:, d:]
            # attention
            dalpha = np.einsum("bnd,bd->bn", E, do)
            dE += alpha[:, :, None] * do[:, None, :]
            dscores = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
            dhh = dhh + np.einsum("bn,bnd->bd", dscores, E)
            dE += dscores[:, :, None] * hh[:, None, :]
            dh2 = self._adapt_back(dhh, acache, tasks, grads) if acache is not None else dhh
            dx, dh_next, dc_next = _lstm_step_back(dh2 + dh_next, dc_next, lcache, P["dec_W"],
                                                   grads["dec_W"], grads["dec_b"], cfg.action_emb_dim)
            if t == 0:
                grads["start_emb"] += dx.sum(axis=0)
            else:
                np.add.at(grads["action_emb"], gold[:, t - 1], dx)
        self._encode_back(enc, dE, dh_next, dc_next, grads)
        if return_probs:
            return loss, grads, probs_out
        return loss, grads

    def sequence_nll(self, example, scope, gate_override=None):
        loss, _ = self.loss_and_grad([example], scope, need_grad=False, gate_override=gate_override)
        return loss

    def step_probs(self, batch, scope):
        """Teacher-forced probability of each gold action, per example."""
        _, probs = self.loss_and_grad(batch, scope, need_grad=False, return_probs=True)
        return probs

    def gradient(self, batch, scope, mask=None):
        """Mean-batch-loss gradient with entries outside ``mask`` set to zero."""
        loss, grads = self.loss_and_grad(batch, scope)
        if mask is not None:
            grads = apply_mask(grads, mask)
        return loss, grads

    # -- decoding ----------------------------------------------------------
    def _decode_init(self, utterances):
        for u in utterances:
            if not u:
                raise EmptyUtterance("utterance has no tokens")
        return self._encode([self.params.word_ids(u) for u in utterances])

    def greedy_decode(self, utterances, tasks, scope, max_steps=None):
        """Greedy decode a batch; returns action-id lists (None on timeout)."""
        P = self.params.tensors
        cfg = self.config
        max_steps = max_steps or cfg.max_steps
        B = len(utterances)
        if B == 0:
            return []
        E, xmask, h, c, _ = self._decode_init(utterances)
        frontier = [[scope.grammar.start] for _ in range(B)]
        out = [[] for _ in range(B)]
        active = np.ones(B, dtype=bool)
        x = np.broadcast_to(P["start_emb"], (B, cfg.action_emb_dim)).copy()
        for _ in range(max_steps):
            idx = np.flatnonzero(active)
            if not len(idx):
                break
            h_a, c_a, logits, _ = self._decode_step(x[idx], h[idx], c[idx], E[idx], xmask[idx],
                                                    [tasks[i] for i in idx])
            h[idx], c[idx] = h_a, c_a
            amask = scope.masks[[scope.symbol_index[frontier[i][-1]] for i in idx]]
            choice = np.where(amask, logits, -np.inf).argmax(axis=1)
            for j, i in enumerate(idx):
                aid = int(choice[j])
                if not amask[j, aid]:
                    raise NoApplicableActions(f"no applicable actions for symbol {frontier[i][-1]!r}")
                out[i].append(aid)
                frontier[i].pop()
                frontier[i].extend(scope.pushes[aid])
                if not frontier[i]:
                    active[i] = False
            x[idx] = P["action_emb"][choice]
        return [seq if not active[i] else None for i, seq in enumerate(out)]

    def _beam(self, E, xmask, h0, c0, task, scope, width, max_steps):
        P = self.params.tensors
        beams = [(0.0, (scope.grammar.start,), (), h0, c0, P["start_emb"])]
        finished = []
        for _ in range(max_steps):
            if not beams:
                break
            k = len(beams)
            H = np.stack([b[3] for b in beams])
            C = np.stack([b[4] for b in beams])
            X = np.stack([b[5] for b in beams])
            h2, c2, logits, _ = self._decode_step(X, H, C, np.repeat(E, k, 0), np.repeat(xmask, k, 0), [task] * k)
            amask = scope.masks[[scope.symbol_index[b[1][-1]] for b in beams]]
            with np.errstate(divide="ignore"):
                logp = np.log(_masked_softmax(logits, amask))
            cands = []
            for j, beam in enumerate(beams):
                for aid in np.flatnonzero(amask[j]):
                    cands.append((beam[0] + float(logp[j, aid]), j, int(aid)))
            cands.sort(key=lambda z: (-z[0], z[1], z[2]))
            live = []
            for lp, j, aid in cands[:width]:
                _, fr, seq, _, _, _ = beams[j]
                fr = fr[:-1] + scope.pushes[aid]
                seq = seq + (aid,)
                if fr:
                    live.append((lp, fr, seq, h2[j], c2[j], P["action_emb"][aid]))
                else:
                    finished.append((lp, seq))
            beams = live
            if finished and beams and max(f[0] for f in finished) >= beams[0][0]:
                break
        if not finished:
            return None, -np.inf
        best = max(finished, key=lambda f: f[0])
        return list(best[1]), best[0]

    def beam_decode(self, utterance, task, scope, width, max_steps=None):
        """Beam search for one utterance; returns ``(action ids, log-prob)``.

        The width-1 (greedy) hypothesis is always a candidate, so the result
        never scores below greedy decoding.  Action ids are None on timeout.
        """
        max_steps = max_steps or self.config.max_steps
        E, xmask, h, c, _ = self._decode_init([utterance])
        best = self._beam(E, xmask, h[0], c[0], task, scope, 1, max_steps)
        if width > 1:
            wide = self._beam(E, xmask, h[0], c[0], task, scope, width, max_steps)
            if wide[1] > best[1]:
                best = wide
        return best

    def parse(self, utterance, task, scope, beam=1, max_steps=None):
        """Best LF for one utterance; raises :class:`ParseTimeout`."""
        tokens = tuple(utterance.split()) if isinstance(utterance, str) else tuple(utterance)
        if beam <= 1:
            seq = self.greedy_decode([tokens], [task], scope, max_steps)[0]
        else:
            seq, _ = self.beam_decode(tokens, task, scope, beam, max_steps)
        if seq is None:
            raise ParseTimeout(f"no complete parse within {max_steps or self.config.max_steps} steps")
        return actions_to_lf([self.params.registry[a] for a in seq], scope.grammar)

    def sequence_logprob(self, tokens, task, action_ids, scope):
        """Log-probability of an action-id sequence (teacher forced)."""
        seq = [self.params.registry[a] for a in action_ids]
        lf = actions_to_lf(seq, scope.grammar)
        ex = Encoded(task, tuple(tokens), lf.text, tuple(action_ids), tuple(frontier_trace(seq, scope.grammar)))
        return -self.sequence_nll(ex, scope)


def apply_mask(grads, mask):
    out = {}
    for name, g in grads.items():
        if name not in mask:
            out[name] = np.zeros_like(g)
        elif mask[name] is None:
            out[name] = g
        else:
            z = np.zeros_like(g)
            z[mask[name]] = g[mask[name]]
            out[name] = z
    return out


class Adam:
    """Adam with per-element step counts so masked entries keep their state."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}

    def _slot(self, name, shape):
        st = self.state.get(name)
        if st is None:
            st = self.state[name] = [np.zeros(shape), np.zeros(shape), np.zeros(shape)]
        elif st[0].shape != shape:
            grown = []
            for arr in st:
                pad = np.zeros(shape)
                pad[tuple(slice(0, s) for s in arr.shape)] = arr
                grown.append(pad)
            st[:] = grown
        return st

    def step(self, tensors, grads, mask, lr):
        b1, b2, eps = self.beta1, self.beta2, self.eps
        for name, rows in mask.items():
            g = grads[name]
            p = tensors[name]
            m, v, t = self._slot(name, p.shape)
            sel = slice(None) if rows is None else rows
            gs = g[sel]
            m[sel] = b1 * m[sel] + (1 - b1) * gs
            v[sel] = b2 * v[sel] + (1 - b2) * gs * gs
            t[sel] += 1
            mhat = m[sel] / (1 - b1 ** t[sel])
            vhat = v[sel] / (1 - b2 ** t[sel])
            p[sel] -= lr * mhat / (np.sqrt(vhat) + eps)

    def to_arrays(self):
        out = {}
        for name, (m, v, t) in self.state.items():
            out[f"adam_m/{name}"] = m
            out[f"adam_v/{name}"] = v
            out[f"adam_t/{name}"] = t
        return out

    def load_arrays(self, arrays):
        self.state = {}
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            slot = self.state.setdefault(name, [None, None, None])
            slot[{"adam_m": 0, "adam_v": 1, "adam_t": 2}[kind]] = arr


def _tag_to_json(tag):
    return tag if tag == SHARED else ["s", tag[1]]


def _tag_from_json(tag):
    return tag if tag == SHARED else ("s", tag[1])


def save_checkpoint(path, params, optimizer=None, extra=None):
    """Write config, partition registry, tensors and optimizer state to an ``.npz``."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "words": params.words,
        "actions": [[a.kind, a.rule, a.slot, a.token] for a in params.registry],
        "action_tags": [_tag_to_json(t) for t in params.action_tags],
        "tags": {k: _tag_to_json(t) for k, t in params.tags.items()},
        "tasks": params.tasks,
        "rng_state": params.rng.bit_generator.state,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    if optimizer is not None:
        arrays.update(optimizer.to_arrays())
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, optimizer, extra)``."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = ParserParams(ParserConfig(**meta["config"]))
        params.tensors = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        params.tags = {k: _tag_from_json(t) for k, t in meta["tags"].items()}
        params.words = list(meta["words"])
        params.word_index = {w: i for i, w in enumerate(params.words)}
        params.registry = ActionRegistry(Action(*a) for a in meta["actions"])
        params.action_tags = [_tag_from_json(t) for t in meta["action_tags"]]
        params.tasks = list(meta["tasks"])
        params.rng.bit_generator.state = meta["rng_state"]
        opt_arrays = {k: data[k].copy() for k in data.files if k.startswith("adam_")}
    optimizer = None
    if opt_arrays:
        optimizer = Adam()
        optimizer.load_arrays(opt_arrays)
    return params, optimizer, meta["extra"]

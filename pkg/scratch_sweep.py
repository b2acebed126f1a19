"""Scratch: tau vs draft training steps, free-running robustness."""
import copy
import time

import numpy as np

from specdec import corpus as C
from specdec import engine as E
from specdec import model as M
from specdec import training as TR
from specdec import tokenizer as TK
from specdec import tensor as T

docs = C.synthesize_documents(4000, seed=1234)
text = "\n".join(d.text for d in docs)
tok = TK.build_tokenizer(text, 512)
cfg = M.ModelConfig()
corpus = TR.TokenizedCorpus.build(docs, tok, cfg.max_seq_len, seed=0)

tc = TR.TrainConfig(learning_rate=1e-3, steps=400, batch_size=16, seq_len=96, seed=0)
target = TR.pretrain_target(corpus, tc, cfg)
print(f"pretrain eval {TR.eval_stream_loss(target, corpus.stream):.3f}", flush=True)
target.set_trainable(False)

rng = np.random.default_rng(np.random.SeedSequence(entropy=0, spawn_key=(4,)))
draft = M.DraftModel(cfg, target, variant="fspad", seed=1)
opt = T.AdamW(draft.parameters(), lr=1e-3, betas=(0.9, 0.95), clip_norm=0.5)

prompts = {t: C.task_prompts(t, 4, seed=7) for t in C.TASKS}


def eval_tau():
    out = {}
    for task, ps in prompts.items():
        drafter = E.ModelDrafter(draft, depth=5, expand_k=8, select_m=8, budget=60)
        engine = E.SpeculativeEngine(target, drafter)
        taus = []
        for p in ps:
            ids = tok.encode(p, add_bos=True)
            _, stats = engine.generate(ids, 48, temperature=0.0, eos_id=TK.EOS)
            taus.append(stats.tau())
        out[task] = float(np.mean(taus))
    return out


for step in range(1400):
    T.clear_tape()
    picks = rng.integers(0, len(corpus.train_docs), size=16)
    tokens, valid, response = TR._pad_batch([corpus.train_docs[i] for i in picks])
    tokens, valid, response = tokens[:, :97], valid[:, :97], response[:, :97]
    loss, lt, lf, top1 = TR.draft_batch_losses(target, draft, tokens, valid, response, 0.1)
    opt.zero_grad()
    T.backward(loss)
    opt.step()
    if (step + 1) % 200 == 0:
        taus = eval_tau()
        print(f"step {step+1}: top1 {top1:.3f} " +
              " ".join(f"{k}={v:.2f}" for k, v in taus.items()), flush=True)

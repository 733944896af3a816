"""Alternating adversarial training of the imagination-guided translator.

Every step runs one generator forward (encode, condition, synthesize,
caption-consistency, aggregate, decode), then:

1. discriminator update on the real image and the DETACHED fake image with a
   detached sentence condition, minimizing
   -1/2 E[log D(x)] - 1/2 E[log(1 - D(f))] - 1/2 E[log D(x,s)]
   -1/2 E[log(1 - D(f,s))];
2. generator update through a fresh discriminator-head forward on the
   ATTACHED fake (discriminator weights flagged non-trainable for the
   duration so they collect no gradient), minimizing
   l_g0 + lambda1 * l_i2t + lambda2 * l_trans plus kl_weight * KL of the
   conditioning posterior. The logged l_g excludes the KL housekeeping term
   and is composed from the logged floats, so the identity
   l_g == l_g0 + lambda1 * l_i2t + lambda2 * l_trans holds exactly.

Translation-side weights (encoder., aggregate., decoder.) follow the inverse
square-root warmup schedule; imagination and discriminator weights follow
the halving schedule, which counts epochs. Probabilities are clamped at 1e-7
before every log. l_trans and l_i2t are per-token means."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aggregation import shifted_pairs, translation_nll_batch
from .config import RunConfig
from .evaluation import bleu
from .imagination import kl_regularizer
from .model import ImagitModel
from .optim import Adam, ParameterStore, Schedule, schedule_lr
from .tensor import Tensor

PROB_FLOOR = 1e-7
CSV_HEADER = "step,l_trans,l_i2t,l_g0,l_g,l_d,lr_translation,lr_gan"
TRANSLATION_PREFIXES = ("encoder.", "aggregate.", "decoder.")


class TrainingError(RuntimeError):
    pass


def _mean_log(p: Tensor) -> Tensor:
    return T.tmean(T.log(T.clip_min(p, PROB_FLOOR)))


def _mean_log_one_minus(p: Tensor) -> Tensor:
    return _mean_log(T.add_scalar(T.scale(p, -1.0), 1.0))


def discriminator_loss(model: ImagitModel, real: Tensor, fake: Tensor,
                       s: Tensor) -> Tensor:
    """Four-term conditional + unconditional hinge-free GAN loss.

    Callers pass fake and s already detached so only discriminator weights
    receive gradient."""
    ru, rc = model.discriminate(real, s)
    fu, fc = model.discriminate(fake, s)
    terms = [_mean_log(ru), _mean_log_one_minus(fu),
             _mean_log(rc), _mean_log_one_minus(fc)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, -0.5)


def generator_adv_loss(model: ImagitModel, fake: Tensor, s: Tensor) -> Tensor:
    """-1/2 E[log D(f)] - 1/2 E[log D(f,s)] on the attached fake."""
    fu, fc = model.discriminate(fake, s)
    return T.scale(T.add(_mean_log(fu), _mean_log(fc)), -0.5)


def compose_generator_loss(l_g0: float, l_i2t: float, l_trans: float,
                           lambda1: float, lambda2: float) -> float:
    """The logged total, composed from logged floats."""
    return l_g0 + lambda1 * l_i2t + lambda2 * l_trans


@dataclass
class LossBundle:
    step: int
    l_trans: float
    l_i2t: float
    l_g0: float
    l_g: float
    l_d: float
    lr_translation: float
    lr_gan: float

    def csv_row(self) -> str:
        return ",".join([str(self.step), repr(self.l_trans), repr(self.l_i2t),
                         repr(self.l_g0), repr(self.l_g), repr(self.l_d),
                         repr(self.lr_translation), repr(self.lr_gan)])

    def check_finite(self) -> None:
        for name in ("l_trans", "l_i2t", "l_g0", "l_g", "l_d"):
            if math.isnan(getattr(self, name)):
                raise TrainingError(f"NaN in {name} at step {self.step}")


def _union_subset(store: ParameterStore, prefixes) -> ParameterStore:
    out = ParameterStore()
    for name, p in store.items():
        if p.trainable and name.startswith(tuple(prefixes)):
            out.adopt(p)
    return out


class Trainer:
    """Owns the optimizer triplet and the per-step update."""

    def __init__(self, model: ImagitModel):
        cfg = model.cfg
        self.model = model
        self.cfg = cfg
        self.translation_params = _union_subset(model.store,
                                                TRANSLATION_PREFIXES)
        self.opt_translation = Adam(self.translation_params,
                                    betas=(cfg.adam_beta1, cfg.adam_beta2),
                                    eps=cfg.adam_eps)
        self.warmup = Schedule("transformer_warmup", d_model=cfg.d_model,
                               warmup_steps=cfg.warmup_steps)
        self.halving = Schedule("halving", base_lr=cfg.gan_base_lr,
                                half_every=cfg.gan_half_every)
        if model.mode == "imagit":
            self.imagination_params = model.store.subset("imagine.")
            self.disc_params = model.store.subset("disc.")
            gan_betas = (cfg.gan_adam_beta1, cfg.gan_adam_beta2)
            self.opt_imagination = Adam(self.imagination_params,
                                        betas=gan_betas, eps=cfg.gan_adam_eps)
            self.opt_disc = Adam(self.disc_params, betas=gan_betas,
                                 eps=cfg.gan_adam_eps)

    def step(self, batch: dict, step: int, epoch: int) -> LossBundle:
        lr_translation = schedule_lr(self.warmup, step)
        lr_gan = schedule_lr(self.halving, epoch)
        if self.model.mode == "imagit":
            bundle = self._step_imagit(batch, step, lr_translation, lr_gan)
        else:
            bundle = self._step_text_only(batch, step, lr_translation, lr_gan)
        bundle.check_finite()
        return bundle

    def _translation_loss(self, memory, mem_mask, batch):
        tgt_in, in_mask, labels, label_mask = shifted_pairs(
            batch["tgt"], batch["tgt_mask"])
        logits = self.model.decode_logits(memory, mem_mask, tgt_in, in_mask,
                                          training=True)
        total, n_tokens, _ = translation_nll_batch(
            logits, labels, label_mask, self.cfg.label_smoothing)
        return T.scale(total, 1.0 / max(1, n_tokens))

    def _step_text_only(self, batch, step, lr_translation, lr_gan):
        model = self.model
        model.store.zero_grad()
        w, s, _ = model.encode(batch["src"], batch["src_mask"], training=True)
        memory, mem_mask = model.memory(w, batch["src_mask"], None,
                                        training=True)
        l_trans_t = self._translation_loss(memory, mem_mask, batch)
        objective = T.scale(l_trans_t, self.cfg.lambda2)
        objective.backward()
        self.opt_translation.step(self.translation_params.grads(),
                                  lr_translation)
        l_trans = l_trans_t.item()
        l_g = compose_generator_loss(0.0, 0.0, l_trans,
                                     self.cfg.lambda1, self.cfg.lambda2)
        return LossBundle(step, l_trans, 0.0, 0.0, l_g, 0.0,
                          lr_translation, lr_gan)

    def _step_imagit(self, batch, step, lr_translation, lr_gan):
        model, cfg = self.model, self.cfg
        model.store.zero_grad()

        # one generator forward, reused by both updates
        w, s, _ = model.encode(batch["src"], batch["src_mask"], training=True)
        z, eps = model.noise(batch["src"].shape[0], deterministic=False)
        im = model.imagine_batch(w, s, batch["src_mask"], z, eps)
        if cfg.lambda1 != 0.0:
            cap_total, cap_tokens, _ = model.caption_nll(
                im["f1"], batch["src"], batch["src_mask"])
            l_i2t_t = T.scale(cap_total, 1.0 / max(1, cap_tokens))
        else:
            l_i2t_t = None
        memory, mem_mask = model.memory(w, batch["src_mask"], im["f1"],
                                        training=True)
        l_trans_t = self._translation_loss(memory, mem_mask, batch)

        # discriminator update on detached fakes
        real = T.constant(batch["images"])
        l_d_t = discriminator_loss(model, real, im["image"].detach(),
                                   s.detach())
        l_d_t.backward()
        self.opt_disc.step(self.disc_params.grads(), lr_gan)
        self.disc_params.zero_grad()

        # generator update through the refreshed discriminator
        disc_flags = [(p, p.trainable) for _, p in self.disc_params.items()]
        for p, _ in disc_flags:
            p.set_trainable(False)
        try:
            l_g0_t = generator_adv_loss(model, im["image"], s)
            objective = T.add(l_g0_t, T.scale(l_trans_t, cfg.lambda2))
            if l_i2t_t is not None:
                objective = T.add(objective, T.scale(l_i2t_t, cfg.lambda1))
            if cfg.kl_weight != 0.0:
                objective = T.add(objective,
                                  T.scale(kl_regularizer(im["ca"]),
                                          cfg.kl_weight))
            objective.backward()
        finally:
            for p, flag in disc_flags:
                p.set_trainable(flag)
        self.opt_translation.step(self.translation_params.grads(),
                                  lr_translation)
        self.opt_imagination.step(self.imagination_params.grads(), lr_gan)

        l_trans = l_trans_t.item()
        l_i2t = 0.0 if l_i2t_t is None else l_i2t_t.item()
        l_g0 = l_g0_t.item()
        l_g = compose_generator_loss(l_g0, l_i2t, l_trans,
                                     cfg.lambda1, cfg.lambda2)
        return LossBundle(step, l_trans, l_i2t, l_g0, l_g, l_d_t.item(),
                          lr_translation, lr_gan)


def corpus_bleu(model: ImagitModel, src: np.ndarray, src_mask: np.ndarray,
                tgt: np.ndarray, tgt_mask: np.ndarray, chunk: int = 64) -> float:
    """Greedy deterministic-decode BLEU against the reference ids."""
    hyps = []
    for lo in range(0, src.shape[0], chunk):
        out, _ = model.translate_batch(src[lo:lo + chunk],
                                       src_mask[lo:lo + chunk],
                                       deterministic=True)
        hyps.extend(out)
    refs = [tgt[i][tgt_mask[i]].tolist() for i in range(tgt.shape[0])]
    return bleu(hyps, refs)


def run_training(model: ImagitModel, train: dict, dev: dict, cfg: RunConfig,
                 csv_path=None, log=None) -> dict:
    """Epoch loop with per-step CSV rows and dev-BLEU early stopping.

    train/dev: dicts of aligned arrays src, src_mask, tgt, tgt_mask and (for
    the adversarial mode) images. Stops on max_steps, max_epochs, dev-BLEU
    patience (restoring the best weights), or a train-BLEU threshold when
    cfg.stop_train_bleu > 0. Returns the row dicts and stopping metadata."""
    trainer = Trainer(model)
    n = train["src"].shape[0]
    data_rng = model.rngs.get("data")
    rows = []
    dev_history = []
    best = {"bleu": -1.0, "epoch": 0, "values": None}
    stop_reason = "max_steps"
    train_bleu = None
    out = open(csv_path, "w", encoding="utf-8") if csv_path else None
    if out:
        out.write(CSV_HEADER + "\n")
    try:
        step = 0
        done = False
        for epoch in range(1, cfg.max_epochs + 1):
            if done:
                break
            order = data_rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                batch = {k: v[idx] for k, v in train.items()}
                step += 1
                bundle = trainer.step(batch, step, epoch)
                rows.append(bundle)
                if out:
                    out.write(bundle.csv_row() + "\n")
                    out.flush()
                if log:
                    log(bundle)
                if cfg.stop_train_bleu > 0.0 and step % cfg.eval_every == 0:
                    train_bleu = corpus_bleu(model, train["src"],
                                             train["src_mask"], train["tgt"],
                                             train["tgt_mask"])
                    if train_bleu >= cfg.stop_train_bleu:
                        stop_reason = "train_bleu"
                        done = True
                        break
                if step >= cfg.max_steps:
                    stop_reason = "max_steps"
                    done = True
                    break
            else:
                dev_bleu = corpus_bleu(model, dev["src"], dev["src_mask"],
                                       dev["tgt"], dev["tgt_mask"])
                dev_history.append({"epoch": epoch, "bleu": dev_bleu})
                if dev_bleu > best["bleu"]:
                    best = {"bleu": dev_bleu, "epoch": epoch,
                            "values": {nm: p.tensor.values.copy()
                                       for nm, p in model.store.items()}}
                elif epoch - best["epoch"] >= cfg.patience:
                    stop_reason = "dev_patience"
                    done = True
            if not done and epoch == cfg.max_epochs:
                stop_reason = "max_epochs"
    finally:
        if out:
            out.close()
    if stop_reason == "dev_patience" and best["values"] is not None:
        for nm, p in model.store.items():
            p.tensor.values[...] = best["values"][nm]
    return {"rows": rows, "stop_reason": stop_reason, "steps": step,
            "dev_history": dev_history, "best_dev_bleu": best["bleu"],
            "best_dev_epoch": best["epoch"], "train_bleu": train_bleu}

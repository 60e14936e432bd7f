"""Pretraining orchestration: the full dual-teacher pipeline, checkpoints,
metrics emission, and the frozen-feature evaluations (linear probe, kNN).

Determinism: every random draw comes from a stream derived from
(seed, epoch, iteration, purpose), so an interrupted run resumed from an
epoch-boundary checkpoint reproduces the continuous run bit-exactly.
"""

import json
import os
import time

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from . import ema as ema_mod
from . import losses as losses_mod
from . import pseudolabel as pl
from .config import TEACHER_SINGLE, TrainConfig
from .errors import DataError, NumericError
from .masking import FoldSet, gen_mask, split_folds
from .optim import AdamW, lr_at
from .tensor import Tensor, concat
from .vit import Decoder, Encoder, ProjectionHead, patchify_batch

METRICS_HEADER = ("epoch,iter,loss_m,loss_c,loss_p,total,"
                  "patch_entropy,class_entropy,m_rec,m_cl,lr,seconds")

# purpose tags for per-iteration RNG streams
_RNG_MASK, _RNG_FOLD, _RNG_DROPPATH, _RNG_INIT = 2, 3, 4, 0x1717


def _stream(seed, epoch, it, purpose):
    return np.random.default_rng(
        np.random.SeedSequence([seed, epoch, it, purpose]))


class Trainer:
    """Owns the student, the teacher(s), and the optimizer for one run."""

    def __init__(self, config: TrainConfig, iters_per_epoch=1):
        config.validate()
        self.cfg = config
        self.iters_per_epoch = iters_per_epoch
        w = config.loss
        self.pseudo_enabled = (w.lambda_c > 0 or w.lambda_p > 0)

        init_rng = _stream(config.seed, 0, 0, _RNG_INIT)
        self.encoder = Encoder(config.model, init_rng)
        self.decoder = Decoder(config.model, init_rng)
        self.head = (ProjectionHead(config.head, init_rng, config.model.embed_dim)
                     if self.pseudo_enabled else None)

        self.student_params = {}
        for prefix, mod in (("encoder", self.encoder), ("decoder", self.decoder),
                            ("head", self.head)):
            if mod is not None:
                for k, v in mod.params().items():
                    self.student_params[f"{prefix}.{k}"] = v

        total_iters = config.optim.total_epochs * iters_per_epoch
        self._build_teachers(total_iters)

        self.optimizer = AdamW(
            self.student_params, lr=config.optim.lr,
            betas=(config.optim.beta1, config.optim.beta2),
            weight_decay=config.optim.weight_decay)
        self.total_iters = total_iters
        self.warmup_iters = config.optim.warmup_epochs * iters_per_epoch
        self.global_iter = 0
        self.epochs_done = 0

    def _build_teachers(self, total_iters):
        cfg = self.cfg
        throwaway = np.random.default_rng(0)

        def clone_encoder():
            return Encoder(cfg.model, throwaway)

        def clone_head():
            return ProjectionHead(cfg.head, throwaway, cfg.model.embed_dim)

        def named(encoder, head):
            params = {f"encoder.{k}": v for k, v in encoder.params().items()}
            if head is not None:
                params |= {f"head.{k}": v for k, v in head.params().items()}
            return params

        def schedule(e):
            total = (total_iters if e.frequency == ema_mod.PER_ITERATION
                     else cfg.optim.total_epochs)
            return ema_mod.EmaSchedule(e.start_momentum, e.end_momentum,
                                       e.frequency, total)

        if cfg.teacher_mode == TEACHER_SINGLE:
            enc = clone_encoder()
            head = clone_head() if self.pseudo_enabled else None
            state = ema_mod.TeacherState(
                "single", named(enc, head), schedule(cfg.ema_rec),
                init_from=self.student_params)
            self.t_rec = self.t_cl = state
            self.t_rec_encoder = self.t_cl_encoder = enc
            self.t_cl_head = head
        else:
            enc_r = clone_encoder()
            self.t_rec = ema_mod.TeacherState(
                "reconstruction", named(enc_r, None), schedule(cfg.ema_rec),
                init_from=self.student_params)
            self.t_rec_encoder = enc_r
            if self.pseudo_enabled:
                enc_c, head_c = clone_encoder(), clone_head()
                self.t_cl = ema_mod.TeacherState(
                    "pseudo_labeling", named(enc_c, head_c), schedule(cfg.ema_cl),
                    init_from=self.student_params)
                self.t_cl_encoder, self.t_cl_head = enc_c, head_c
            else:
                self.t_cl = None
                self.t_cl_encoder = self.t_cl_head = None

    # -- forward pieces -----------------------------------------------------

    def _teacher_fold_tokens(self, encoder, patches, folds):
        """Run an EMA encoder over each fold; returns list of [B, F, D]
        patch-token arrays (class rows stripped) as plain ndarrays."""
        out = []
        for fold in folds.folds:
            fold_patches = np.take(patches, fold, axis=1)
            tokens = encoder(fold_patches, fold)  # no grad: teacher is frozen
            assert not tokens.requires_grad, "teacher output joined the tape"
            out.append(tokens.data[:, 1:, :])
        return out

    def _pseudo_targets(self, patches_complex, pseudo_folds):
        """Teacher pass of the pseudo-labeling branch; all plain arrays."""
        sk = self.cfg.sinkhorn
        cls_scores, patch_scores, feats = [], [], []
        for fold in pseudo_folds.folds:
            fold_patches = np.take(patches_complex, fold, axis=1)
            tokens = self.t_cl_encoder(fold_patches, fold)
            feats.append(tokens.data[:, 1:, :])
            cs, ps = self.t_cl_head(tokens)
            cls_scores.append(cs.data)
            patch_scores.append(ps.data)
        assignments = pl.teacher_targets(cls_scores, patch_scores,
                                         sk.n_iters, sk.teacher_temperature)
        return assignments, feats

    def compute_loss(self, batch, mask, folds, pseudo_folds, rec_tokens,
                     assignments, teacher_feats, frozen_match=None,
                     train=True, dp_rng=None):
        """Student forward + all enabled loss terms.

        Everything teacher-side arrives precomputed as constants. With
        `frozen_match` set, the patch-target matching from a previous call
        is reused (finite-difference checks need the argmin frozen).
        """
        cfg = self.cfg
        w = cfg.loss
        patches = patchify_batch(batch.simple, cfg.model.patch_size)
        visible = np.take(patches, mask.visible_indices, axis=1)
        encoded = self.encoder(visible, mask.visible_indices,
                               train=train, rng=dp_rng)
        dec_out = self.decoder(encoded, mask.visible_indices,
                               mask.masked_indices)

        loss_m = mean_cos = None
        if w.lambda_m > 0:
            loss_m, mean_cos = losses_mod.recon_loss(dec_out, rec_tokens, folds)

        loss_c = loss_p = None
        patch_entropy = class_entropy = 0.0
        match = frozen_match
        if self.pseudo_enabled:
            masked_rows = dec_out.take(mask.masked_indices + 1, axis=1)
            student_tokens = concat(
                [dec_out.take(np.array([0]), axis=1), masked_rows], axis=1)
            cls_scores, patch_scores = self.head(student_tokens)
            if w.lambda_p > 0:
                if match is None:
                    match = pl.nearest_patch_match_batch(
                        masked_rows.data, teacher_feats)
                fold_idx, row_idx = match[0], match[1]
                stacked = np.stack([a.patch for a in assignments])  # [K,B,F,Kc]
                b_idx = np.arange(stacked.shape[1])[:, None]
                matched = stacked[fold_idx, b_idx, row_idx]  # [B, M, Kc]
                loss_p = losses_mod.tempered_cross_entropy(
                    matched, patch_scores,
                    self.cfg.sinkhorn.student_temperature)
                patch_entropy = pl.mean_row_entropy(stacked)
            if w.lambda_c > 0:
                c_target = pl.class_target_average([a.cls for a in assignments])
                loss_c = losses_mod.tempered_cross_entropy(
                    c_target, cls_scores,
                    self.cfg.sinkhorn.student_temperature)
                class_entropy = pl.mean_row_entropy(c_target)

        report = losses_mod.total_loss(
            w, loss_m=loss_m, loss_c=loss_c, loss_p=loss_p,
            mean_cosine=mean_cos or 0.0, patch_entropy=patch_entropy,
            class_entropy=class_entropy)
        return report, match

    def prepare_step(self, batch, epoch, it_in_epoch):
        """Mask, folds, and every teacher-side constant for one iteration."""
        cfg = self.cfg
        n = cfg.model.num_patches
        mask = gen_mask(n, cfg.masking.ratio,
                        _stream(cfg.seed, epoch, it_in_epoch, _RNG_MASK))
        folds = split_folds(mask, cfg.masking.num_folds,
                            _stream(cfg.seed, epoch, it_in_epoch, _RNG_FOLD))

        rec_tokens = None
        if cfg.loss.lambda_m > 0:
            patches = patchify_batch(batch.simple, cfg.model.patch_size)
            rec_tokens = self._teacher_fold_tokens(
                self.t_rec_encoder, patches, folds)

        assignments = teacher_feats = None
        pseudo_folds = folds
        if self.pseudo_enabled:
            if not cfg.multifold_pseudo_labeling:
                pseudo_folds = FoldSet(num_folds=1,
                                       folds=[np.concatenate(folds.folds)])
            view = (batch.complex if cfg.augmentation_mode == "dual"
                    else batch.simple)
            patches_c = patchify_batch(view, cfg.model.patch_size)
            assignments, teacher_feats = self._pseudo_targets(
                patches_c, pseudo_folds)
        return mask, folds, pseudo_folds, rec_tokens, assignments, teacher_feats

    def train_step(self, batch, epoch, it_in_epoch, at_epoch_end=False):
        """One optimization step; returns (LossReport, m_rec, m_cl, lr)."""
        cfg = self.cfg
        ctx = self.prepare_step(batch, epoch, it_in_epoch)
        dp_rng = _stream(cfg.seed, epoch, it_in_epoch, _RNG_DROPPATH)
        self.optimizer.zero_grad()
        report, _ = self.compute_loss(batch, *ctx, train=True, dp_rng=dp_rng)
        lr = lr_at(self.global_iter, self.total_iters, self.warmup_iters,
                   cfg.optim.lr)
        if report.total_tensor.requires_grad:
            report.total_tensor.backward()
            self.optimizer.step(lr)
        # teacher EMA strictly after the optimizer step
        for st in ({self.t_rec, self.t_cl} - {None}):
            st.opt_step_seen = self.optimizer.step_count
        ema_mod.maybe_update(self.t_rec, self.student_params,
                             self.global_iter, epoch, at_epoch_end)
        if self.t_cl is not None and self.t_cl is not self.t_rec:
            ema_mod.maybe_update(self.t_cl, self.student_params,
                                 self.global_iter, epoch, at_epoch_end)
        self.global_iter += 1
        # momentum of the most recent applied update (survives resume,
        # unlike a transient attribute): momentum(update_count) is exactly
        # the value used when update_count was incremented
        m_rec = self.t_rec.momentum(self.t_rec.update_count)
        m_cl = (self.t_cl.momentum(self.t_cl.update_count)
                if self.t_cl is not None else 0.0)
        return report, m_rec, m_cl, lr

    # -- persistence --------------------------------------------------------

    def _records(self):
        recs = [(f"student.{k}", p.data) for k, p in self.student_params.items()]
        if self.cfg.teacher_mode == TEACHER_SINGLE:
            teacher_names = [("teacher_single", self.t_rec)]
        else:
            teacher_names = [("teacher_rec", self.t_rec)]
            if self.t_cl is not None:
                teacher_names.append(("teacher_cl", self.t_cl))
        for prefix, st in teacher_names:
            recs += [(f"{prefix}.{k}", p.data) for k, p in st.params.items()]
        recs += [(f"adamw.m.{k}", v) for k, v in self.optimizer.m.items()]
        recs += [(f"adamw.v.{k}", v) for k, v in self.optimizer.v.items()]
        return recs

    def run_state(self):
        return {"epochs_done": self.epochs_done,
                "global_iter": self.global_iter,
                "adamw_step": self.optimizer.step_count,
                "t_rec_updates": self.t_rec.update_count,
                "t_cl_updates": (self.t_cl.update_count
                                 if self.t_cl is not None else 0),
                "iters_per_epoch": self.iters_per_epoch}

    def save(self, path):
        ckpt.save_checkpoint(path, self.cfg.to_json(), self.run_state(),
                             self._records())

    @classmethod
    def load(cls, path):
        config_json, state, records = ckpt.load_checkpoint(path)
        cfg = TrainConfig.from_json(config_json)
        tr = cls(cfg, iters_per_epoch=state["iters_per_epoch"])
        ckpt.restore_into(records, tr.student_params, "student.")
        if cfg.teacher_mode == TEACHER_SINGLE:
            ckpt.restore_into(records, tr.t_rec.params, "teacher_single.")
        else:
            ckpt.restore_into(records, tr.t_rec.params, "teacher_rec.")
            if tr.t_cl is not None:
                ckpt.restore_into(records, tr.t_cl.params, "teacher_cl.")
        m = {n: t for n, t in records if n.startswith("adamw.m.")}
        v = {n: t for n, t in records if n.startswith("adamw.v.")}
        for k in tr.optimizer.m:
            tr.optimizer.m[k] = m[f"adamw.m.{k}"]
            tr.optimizer.v[k] = v[f"adamw.v.{k}"]
        tr.optimizer.step_count = state["adamw_step"]
        tr.global_iter = state["global_iter"]
        tr.epochs_done = state["epochs_done"]
        tr.t_rec.update_count = state["t_rec_updates"]
        if tr.t_cl is not None:
            tr.t_cl.update_count = state["t_cl_updates"]
        return tr


# -- the pretraining entry point ---------------------------------------------


def pretrain(config, dataset, out_dir, resume=None, max_iters=None):
    """Run (or resume) pretraining; writes metrics.csv and checkpoint.bin.

    `max_iters` caps total iterations for smoke runs. Returns the Trainer.
    """
    os.makedirs(out_dir, exist_ok=True)
    iters_per_epoch = len(dataset) // config.optim.batch_size
    if iters_per_epoch < 1:
        raise DataError(
            f"dataset of {len(dataset)} records is smaller than one batch "
            f"({config.optim.batch_size})")
    if resume:
        trainer = Trainer.load(resume)
        if trainer.cfg.to_json() != config.to_json():
            raise DataError("resume checkpoint was built with a different config")
    else:
        trainer = Trainer(config, iters_per_epoch=iters_per_epoch)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    new_file = not (resume and os.path.exists(metrics_path))
    mode = "a" if not new_file else "w"
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    t0 = time.time()
    done = 0
    with open(metrics_path, mode) as mf:
        if new_file:
            mf.write(f"# config {config.to_json()}\n")
            mf.write(METRICS_HEADER + "\n")
        try:
            for epoch in range(trainer.epochs_done, config.optim.total_epochs):
                order = data_mod.epoch_order(len(dataset), config.seed, epoch)
                for it in range(iters_per_epoch):
                    idx = order[it * config.optim.batch_size:
                                (it + 1) * config.optim.batch_size]
                    batch = data_mod.make_batch(
                        dataset, idx, config.seed, epoch, config.augment,
                        need_complex=(trainer.pseudo_enabled and
                                      config.augmentation_mode == "dual"))
                    last = (it == iters_per_epoch - 1)
                    rep, m_rec, m_cl, lr = trainer.train_step(
                        batch, epoch, it, at_epoch_end=last)
                    if trainer.global_iter % config.log_every == 0 or last:
                        mf.write(f"{epoch},{trainer.global_iter},"
                                 f"{rep.loss_m:.6f},{rep.loss_c:.6f},"
                                 f"{rep.loss_p:.6f},{rep.total:.6f},"
                                 f"{rep.patch_target_entropy:.6f},"
                                 f"{rep.class_target_entropy:.6f},"
                                 f"{m_rec:.6f},{m_cl:.6f},{lr:.8f},"
                                 f"{time.time() - t0:.3f}\n")
                    done += 1
                    if max_iters is not None and done >= max_iters:
                        trainer.epochs_done = epoch + (1 if last else 0)
                        trainer.save(ckpt_path)
                        return trainer
                trainer.epochs_done = epoch + 1
                trainer.save(ckpt_path)
        except NumericError:
            trainer.save(os.path.join(out_dir, "checkpoint.abort.bin"))
            raise
    return trainer


# -- evaluation -----------------------------------------------------------------


def encode_features(encoder, model_cfg, dataset, augment_cfg=None,
                    batch_size=256):
    """Frozen class-token features for every record (no masking, no crops)."""
    aug = augment_cfg or data_mod.AugmentConfig()
    n = len(dataset)
    feats = np.empty((n, model_cfg.embed_dim), np.float32)
    all_idx = np.arange(model_cfg.num_patches)
    for lo in range(0, n, batch_size):
        imgs = dataset.images[lo:lo + batch_size].astype(np.float32) / 255.0
        imgs = data_mod.standardize(imgs, aug)
        patches = patchify_batch(imgs, model_cfg.patch_size)
        tokens = encoder(patches, all_idx)
        feats[lo:lo + imgs.shape[0]] = tokens.data[:, 0, :]
    return feats


def linear_probe(encoder, model_cfg, train_ds, test_ds, probe_epochs,
                 seed=0, lr=0.01, batch_size=256, augment_cfg=None):
    """Train a linear classifier on frozen class-token features; top-1."""
    f_train = encode_features(encoder, model_cfg, train_ds, augment_cfg)
    f_test = encode_features(encoder, model_cfg, test_ds, augment_cfg)
    rng = np.random.default_rng(seed)
    d = f_train.shape[1]
    w = Tensor(rng.normal(0, 0.01, (d, 10)).astype(np.float32),
               requires_grad=True)
    b = Tensor(np.zeros(10, np.float32), requires_grad=True)
    opt = AdamW({"w": w, "b": b}, lr=lr, weight_decay=0.0)
    onehot = np.eye(10, dtype=np.float32)[train_ds.labels]
    for _ in range(probe_epochs):
        order = rng.permutation(len(train_ds))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            logits = Tensor(f_train[idx]) @ w + b
            probs = pl.student_assign(logits, 1.0)
            loss = losses_mod.cross_entropy(onehot[idx], probs)
            opt.zero_grad()
            loss.backward()
            opt.step()
    pred = (f_test @ w.data + b.data).argmax(axis=1)
    return float((pred == test_ds.labels).mean())


def knn_eval(train_feats, train_labels, test_feats, test_labels, k,
             exclude_self=False):
    """Cosine-similarity k-nearest-neighbor top-1 accuracy.

    With `exclude_self`, the single most similar neighbor of each query is
    dropped (for evaluating a set against itself).
    """
    def unit(x):
        return x / (np.linalg.norm(x, axis=1, keepdims=True) + 1e-12)

    sims = unit(np.asarray(test_feats)) @ unit(np.asarray(train_feats)).T
    k_eff = min(k + (1 if exclude_self else 0), sims.shape[1])
    nbr = np.argsort(-sims, axis=1, kind="stable")[:, :k_eff]
    if exclude_self:
        nbr = nbr[:, 1:]
    votes = np.asarray(train_labels)[nbr]
    pred = np.array([np.bincount(v, minlength=10).argmax() for v in votes])
    return float((pred == np.asarray(test_labels)).mean())


# -- metrics export ----------------------------------------------------------


def export_metrics(run_dir, out_dir=None):
    """Re-emit metrics.csv (skipping corrupt rows) plus a summary text file.

    Returns (n_rows, n_skipped, summary dict).
    """
    out_dir = out_dir or run_dir
    src = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(src):
        raise DataError(f"no metrics.csv under {run_dir}")
    cols = METRICS_HEADER.split(",")
    rows, skipped, config_line = [], 0, None
    with open(src) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# config "):
                config_line = line[len("# config "):]
                continue
            if not line or line == METRICS_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                skipped += 1
                continue
            try:
                rows.append([int(parts[0]), int(parts[1])] +
                            [float(x) for x in parts[2:]])
            except ValueError:
                skipped += 1
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "export.csv"), "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")
    summary = {}
    if rows:
        arr = np.array([r[2:] for r in rows], dtype=np.float64)
        names = cols[2:]
        final = {n: arr[-1, i] for i, n in enumerate(names)}
        summary = {
            "rows": len(rows), "skipped": skipped,
            "final_loss_m": final["loss_m"], "final_loss_c": final["loss_c"],
            "final_loss_p": final["loss_p"], "final_total": final["total"],
            "min_patch_entropy": float(arr[:, names.index("patch_entropy")].min()),
            "lr_first": float(arr[0, names.index("lr")]),
            "lr_last": float(arr[-1, names.index("lr")]),
            "m_rec_last": final["m_rec"], "m_cl_last": final["m_cl"],
        }
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        if config_line:
            fh.write(f"config: {config_line}\n")
        for key, val in summary.items():
            fh.write(f"{key}: {val}\n")
        if skipped:
            fh.write(f"warning: skipped {skipped} corrupt rows\n")
    return len(rows), skipped, summary

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{block_mask, linear_warmup, multi_crop, warmup_cosine_lr, cosine_schedule, EvalBackbone, PretrainConfig};
use crate::backbone::{ema_update_params, load_checkpoint, save_checkpoint, Checkpoint, Vit};
use crate::data::ImageSample;
use crate::error::{ensure, Error, Result};
use crate::heads_losses::{
    hybrid_total_loss, image_level_loss_grad, koleo_loss_grad, log_softmax_backward, log_softmax_rows,
    masked_patch_loss_grad, sinkhorn_knopp, supervised_prototype_loss_grad, to_f32, to_f64, LossComponents,
    LossReport, ProjectionHead,
};
use crate::image::Image;
use crate::nn::optim::{clip_grad_norm, Adam};
use crate::nn::{join_name, Mat, ParameterSnapshot, Params};
use crate::prototypes::PrototypeBank;
use crate::rng::{component_rng, stream_rng};

/// Trainable side: backbone, both projection heads and the prototype bank.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub backbone: Vit,
    pub dino_head: ProjectionHead,
    pub ibot_head: ProjectionHead,
    /// Absent when the corpus declares no labels.
    pub prototypes: Option<PrototypeBank>,
}

/// EMA copy of the student's backbone and heads.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub backbone: Vit,
    pub dino_head: ProjectionHead,
    pub ibot_head: ProjectionHead,
}

impl Params for StudentModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.backbone.visit(&join_name(prefix, "backbone"), f);
        self.dino_head.visit(&join_name(prefix, "dino_head"), f);
        self.ibot_head.visit(&join_name(prefix, "ibot_head"), f);
        if let Some(p) = &self.prototypes {
            p.visit(&join_name(prefix, "prototypes"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.backbone.visit_mut(&join_name(prefix, "backbone"), f);
        self.dino_head.visit_mut(&join_name(prefix, "dino_head"), f);
        self.ibot_head.visit_mut(&join_name(prefix, "ibot_head"), f);
        if let Some(p) = &mut self.prototypes {
            p.visit_mut(&join_name(prefix, "prototypes"), f);
        }
    }
}

impl Params for TeacherModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.backbone.visit(&join_name(prefix, "backbone"), f);
        self.dino_head.visit(&join_name(prefix, "dino_head"), f);
        self.ibot_head.visit(&join_name(prefix, "ibot_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.backbone.visit_mut(&join_name(prefix, "backbone"), f);
        self.dino_head.visit_mut(&join_name(prefix, "dino_head"), f);
        self.ibot_head.visit_mut(&join_name(prefix, "ibot_head"), f);
    }
}

impl StudentModel {
    pub fn new(cfg: &PretrainConfig, label_names: &[String]) -> Result<Self> {
        cfg.validate()?;
        let mut rng = component_rng(cfg.train.seed, "student-init");
        let backbone = Vit::new(cfg.model.clone(), &mut rng)?;
        let dino_head = ProjectionHead::new(&mut rng, cfg.model.dim, &cfg.head)?;
        let ibot_head = ProjectionHead::new(&mut rng, cfg.model.dim, &cfg.head)?;
        let prototypes = if label_names.is_empty() {
            None
        } else {
            let embedder = cfg.prototypes.embedder(cfg.model.dim)?;
            let seed = cfg.train.seed ^ 0x5052_4f54;
            Some(PrototypeBank::build(
                label_names,
                embedder.as_ref(),
                cfg.prototypes.merge_threshold,
                cfg.prototypes.init,
                seed,
            )?)
        };
        Ok(StudentModel {
            backbone,
            dino_head,
            ibot_head,
            prototypes,
        })
    }

    pub fn teacher(&self) -> TeacherModel {
        TeacherModel {
            backbone: self.backbone.clone(),
            dino_head: self.dino_head.clone(),
            ibot_head: self.ibot_head.clone(),
        }
    }

    fn zeroed(&self) -> StudentModel {
        let mut g = self.clone();
        g.zero();
        g
    }
}

impl TeacherModel {
    /// `teacher ← m·teacher + (1−m)·student` over backbone and heads.
    pub fn ema_from(&mut self, student: &StudentModel, momentum: f32) -> Result<()> {
        ema_update_params(&mut self.backbone, &student.backbone.snapshot(), momentum)?;
        ema_update_params(&mut self.dino_head, &student.dino_head.snapshot(), momentum)?;
        ema_update_params(&mut self.ibot_head, &student.ibot_head.snapshot(), momentum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
    pub image_loss: f64,
    pub patch_loss: f64,
    pub koleo_loss: f64,
    pub sup_loss: f64,
    pub total: f64,
}

/// State visible to a per-step hook, after the optimizer and EMA updates.
pub struct StepEvent<'a> {
    pub step: u64,
    pub momentum: f32,
    pub teacher_before: &'a ParameterSnapshot,
    pub student: &'a StudentModel,
    pub teacher: &'a TeacherModel,
    pub report: &'a LossReport,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `checkpoint/` (rewritten every epoch) and `train_log.jsonl`.
    pub output_dir: Option<PathBuf>,
    /// Continue from `output_dir/checkpoint` when it exists.
    pub resume: bool,
    pub max_steps: Option<u64>,
    pub hook: Option<&'a mut dyn FnMut(&StepEvent<'_>)>,
}

pub struct PretrainOutput {
    pub student: StudentModel,
    pub teacher: TeacherModel,
    pub log: Vec<TrainRecord>,
    pub checkpoint: Checkpoint,
}

fn gather_rows(m: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros((idx.len(), m.ncols()));
    for (o, &i) in idx.iter().enumerate() {
        out.row_mut(o).assign(&m.row(i));
    }
    out
}

fn sample_targets(sample: &ImageSample, label_names: &[String], bank: &PrototypeBank) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut names = Vec::with_capacity(sample.label_ids.len());
    for &l in &sample.label_ids {
        let n = label_names
            .get(l)
            .ok_or_else(|| Error::Data(format!("{}: label id {l} out of range", sample.sample_id)))?;
        names.push(n.as_str());
    }
    bank.targets(&names)
}

/// One forward/backward pass over `batch`. Returns the loss report and the
/// student gradient (same structure as the student).
pub fn train_step(
    student: &StudentModel,
    teacher: &TeacherModel,
    batch: &[&ImageSample],
    label_names: &[String],
    cfg: &PretrainConfig,
    teacher_temp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, StudentModel)> {
    let b = batch.len();
    ensure!(b >= 1, Param, "empty batch");
    let (ng, nl) = (cfg.crops.n_global, cfg.crops.n_local);
    let grid = cfg.model.grid();
    let np = grid * grid;
    let d = cfg.model.dim;
    let tau_s = cfg.head.student_temp;
    let w = &cfg.weights;
    let iters = cfg.train.sinkhorn_iters;

    let mut globals: Vec<Image> = Vec::with_capacity(b * ng);
    let mut locals: Vec<Image> = Vec::with_capacity(b * nl);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(b * ng);
    for s in batch {
        let (g, l) = multi_crop(&s.image, &cfg.crops, rng);
        globals.extend(g);
        locals.extend(l);
        for _ in 0..ng {
            masks.push(block_mask(np, grid, &cfg.masks, rng)?);
        }
    }
    let g_refs: Vec<&Image> = globals.iter().collect();
    let l_refs: Vec<&Image> = locals.iter().collect();
    let n_gl = b * ng;
    let n_ll = b * nl;

    // teacher targets
    let t_out = teacher.backbone.encode(&g_refs, None)?;
    let p_t = sinkhorn_knopp(&to_f64(&teacher.dino_head.infer(&t_out.cls)), teacher_temp, iters)?;
    let mut crop_of_row = Vec::new();
    let mut flat_idx = Vec::new();
    for (c, m) in masks.iter().enumerate() {
        for (j, &on) in m.iter().enumerate() {
            if on {
                crop_of_row.push(c);
                flat_idx.push(c * np + j);
            }
        }
    }
    let p_hat_t = if flat_idx.is_empty() {
        None
    } else {
        let rows = gather_rows(&t_out.patches, &flat_idx);
        Some(sinkhorn_knopp(&to_f64(&teacher.ibot_head.infer(&rows)), teacher_temp, iters)?)
    };

    // student
    let (s_g, c_g) = student.backbone.forward_train(&g_refs, Some(&masks))?;
    let s_l = if nl > 0 { Some(student.backbone.forward_train(&l_refs, None)?) } else { None };
    let mut grad = student.zeroed();
    let mut d_cls_g = Mat::zeros((n_gl, d));
    let mut d_cls_l = Mat::zeros((n_ll, d));
    let mut d_patches = Mat::zeros((n_gl * np, d));

    // image level
    let mut cls_all = Mat::zeros((n_gl + n_ll, d));
    cls_all.slice_mut(s![..n_gl, ..]).assign(&s_g.cls);
    if let Some((o, _)) = &s_l {
        cls_all.slice_mut(s![n_gl.., ..]).assign(&o.cls);
    }
    let (h_logits, h_cache) = student.dino_head.forward(&cls_all);
    let logp = log_softmax_rows(&to_f64(&h_logits), tau_s);
    let mut d_logp = Array2::<f64>::zeros(logp.dim());
    let mut image_loss = 0.0;
    for i in 0..b {
        let gr = i * ng..(i + 1) * ng;
        let lr = n_gl + i * nl..n_gl + (i + 1) * nl;
        let r = image_level_loss_grad(
            &logp.slice(s![gr.clone(), ..]).to_owned(),
            &logp.slice(s![lr.clone(), ..]).to_owned(),
            &p_t.slice(s![gr.clone(), ..]).to_owned(),
        )?;
        image_loss += r.loss / b as f64;
        d_logp.slice_mut(s![gr, ..]).scaled_add(1.0 / b as f64, &r.d_global);
        d_logp.slice_mut(s![lr, ..]).scaled_add(1.0 / b as f64, &r.d_local);
    }
    if w.w_image > 0.0 {
        let dl = log_softmax_backward(&logp, &(d_logp * w.w_image), tau_s);
        let dx = student.dino_head.backward(&h_cache, &to_f32(&dl), &mut grad.dino_head);
        d_cls_g += &dx.slice(s![..n_gl, ..]);
        d_cls_l += &dx.slice(s![n_gl.., ..]);
    }

    // patch level
    let mut patch_loss = 0.0;
    if let Some(p_hat_t) = &p_hat_t {
        let rows = gather_rows(&s_g.patches, &flat_idx);
        let (pl, pc) = student.ibot_head.forward(&rows);
        let lp = log_softmax_rows(&to_f64(&pl), tau_s);
        let (loss, g) = masked_patch_loss_grad(&lp, p_hat_t, &crop_of_row, n_gl)?;
        patch_loss = loss;
        if w.w_patch > 0.0 {
            let dl = log_softmax_backward(&lp, &(g * w.w_patch), tau_s);
            let dx = student.ibot_head.backward(&pc, &to_f32(&dl), &mut grad.ibot_head);
            for (r, &fi) in flat_idx.iter().enumerate() {
                let mut row = d_patches.row_mut(fi);
                row += &dx.row(r);
            }
        }
    }

    // koleo, per global view across the batch
    let mut koleo = 0.0;
    if b >= 2 {
        for g in 0..ng {
            let idx: Vec<usize> = (0..b).map(|i| i * ng + g).collect();
            let (l, dx) = koleo_loss_grad(&to_f64(&gather_rows(&s_g.cls, &idx)))?;
            koleo += l / ng as f64;
            if w.w_koleo > 0.0 {
                let dx = to_f32(&(dx * (w.w_koleo / ng as f64)));
                for (r, &ci) in idx.iter().enumerate() {
                    let mut row = d_cls_g.row_mut(ci);
                    row += &dx.row(r);
                }
            }
        }
    }

    // prototype supervision on global crops
    let mut sup = 0.0;
    if let Some(bank) = &student.prototypes {
        let nc = bank.n_c();
        let mut y = Array2::<f64>::zeros((n_gl, nc));
        let mut n = Array2::<f64>::zeros((n_gl, nc));
        for (i, s) in batch.iter().enumerate() {
            let (ys, ns) = sample_targets(s, label_names, bank)?;
            for g in 0..ng {
                for j in 0..nc {
                    y[[i * ng + g, j]] = ys[j] as f64;
                    n[[i * ng + g, j]] = ns[j] as f64;
                }
            }
        }
        let r = supervised_prototype_loss_grad(&to_f64(&s_g.cls), &to_f64(&bank.w), &y, &n)?;
        sup = r.loss;
        if w.w_sup > 0.0 {
            d_cls_g += &to_f32(&(r.d_cls * w.w_sup));
            if let Some(gb) = &mut grad.prototypes {
                gb.w += &to_f32(&(r.d_prototypes * w.w_sup));
            }
        }
    }

    let report = hybrid_total_loss(
        LossComponents {
            image_loss,
            patch_loss,
            koleo_loss: koleo,
            sup_loss: sup,
        },
        w,
    );
    if !report.is_finite() {
        return Ok((report, grad));
    }
    student.backbone.backward(&c_g, &d_cls_g, Some(&d_patches), &mut grad.backbone);
    if let Some((_, c_l)) = &s_l {
        student.backbone.backward(c_l, &d_cls_l, None, &mut grad.backbone);
    }
    Ok((report, grad))
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with("head.prototypes")
}

fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_log(path: &Path, log: &[TrainRecord]) -> Result<()> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn checkpoint_config(cfg: &PretrainConfig, label_names: &[String], epoch: usize) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "pretrain": serde_json::to_value(cfg)?,
        "label_names": label_names,
        "epoch": epoch,
    }))
}

fn make_checkpoint(
    step: u64,
    cfg: &PretrainConfig,
    label_names: &[String],
    epoch: usize,
    rng: &ChaCha8Rng,
    student: &StudentModel,
    teacher: &TeacherModel,
    opt: &Adam,
) -> Result<Checkpoint> {
    let mut params = student.snapshot().with_prefix("student");
    params.merge(teacher.snapshot().with_prefix("teacher"));
    Ok(Checkpoint {
        step,
        config: checkpoint_config(cfg, label_names, epoch)?,
        rng: Some(rng.clone()),
        params,
        optimizer: Some(opt.clone()),
    })
}

/// Loads the pretraining config and the `which` backbone from a checkpoint
/// directory written by [`train`].
pub fn load_pretrained(dir: &Path, which: EvalBackbone) -> Result<(PretrainConfig, Vit)> {
    let ckpt = load_checkpoint(dir)?;
    let cfg: PretrainConfig = serde_json::from_value(
        ckpt.config
            .get("pretrain")
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint lacks a `pretrain` config".into()))?,
    )?;
    let vit = Vit::from_snapshot(cfg.model.clone(), &ckpt.params.sub(which.prefix()))?;
    Ok((cfg, vit))
}

/// Self-distillation pretraining over `samples`; `label_names` resolves the
/// samples' `label_ids` for prototype supervision.
pub fn train(
    samples: &[ImageSample],
    label_names: &[String],
    cfg: &PretrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<PretrainOutput> {
    ensure!(!samples.is_empty(), Param, "cannot pretrain on an empty corpus");
    cfg.validate()?;
    let tc = &cfg.train;
    let steps_per_epoch = samples.len().div_ceil(tc.batch_size) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;
    let warmup_steps = (tc.warmup_fraction * total_steps as f64).round() as u64;
    let peak_lr = tc.peak_lr();

    let mut student = StudentModel::new(cfg, label_names)?;
    let mut teacher = student.teacher();
    let mut opt = Adam::adamw(tc.weight_decay as f32);
    let mut rng = component_rng(tc.seed, "augment");
    let mut log = Vec::new();
    let mut start_epoch = 0usize;
    let mut step = 0u64;

    let ckpt_dir = opts.output_dir.as_ref().map(|d| d.join("checkpoint"));
    let log_path = opts.output_dir.as_ref().map(|d| d.join("train_log.jsonl"));
    if let Some(d) = &opts.output_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    if opts.resume {
        if let Some(cd) = ckpt_dir.as_ref().filter(|c| c.join("header.json").exists()) {
            let ckpt = load_checkpoint(cd)?;
            ckpt.check_config("/pretrain", &serde_json::to_value(cfg)?)?;
            student.load_snapshot(&ckpt.params.sub("student"))?;
            teacher.load_snapshot(&ckpt.params.sub("teacher"))?;
            opt = ckpt
                .optimizer
                .ok_or_else(|| Error::Config("checkpoint lacks optimizer state".into()))?;
            rng = ckpt.rng.ok_or_else(|| Error::Config("checkpoint lacks rng state".into()))?;
            step = ckpt.step;
            start_epoch = ckpt.config["epoch"].as_u64().unwrap_or(0) as usize;
            if let Some(lp) = log_path.as_ref().filter(|p| p.exists()) {
                log = read_log(lp)?.into_iter().filter(|r| r.step < step).collect();
            }
        }
    }

    let mut finished_epoch = start_epoch;
    'epochs: for epoch in start_epoch..tc.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(tc.seed, "epoch-order", epoch as u64));
        let teacher_temp = linear_warmup(
            epoch as u64,
            tc.teacher_temp_schedule.2 as u64,
            tc.teacher_temp_schedule.0,
            tc.teacher_temp_schedule.1,
        );
        for chunk in order.chunks(tc.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let lr = warmup_cosine_lr(step, total_steps, warmup_steps, peak_lr, tc.min_lr);
            let momentum = cosine_schedule(
                step,
                total_steps.saturating_sub(1),
                tc.momentum_schedule.0,
                tc.momentum_schedule.1,
            );
            let (report, grad) = train_step(&student, &teacher, &batch, label_names, cfg, teacher_temp, &mut rng)?;
            if !report.is_finite() {
                let ids: Vec<String> = batch.iter().map(|s| s.sample_id.clone()).collect();
                if let Some(d) = &opts.output_dir {
                    let p = d.join("nonfinite_batch.json");
                    let dump = serde_json::json!({ "step": step, "epoch": epoch, "batch_ids": ids, "report": report });
                    fs::write(&p, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: ids,
                    detail: format!("{report:?}"),
                });
            }
            let mut g = grad.snapshot();
            clip_grad_norm(&mut g, tc.clip_grad as f32);
            opt.update(&mut student, &g, lr as f32, &|_| true, &decays);
            let teacher_before = opts.hook.as_ref().map(|_| teacher.snapshot());
            teacher.ema_from(&student, momentum as f32)?;
            if let (Some(h), Some(tb)) = (opts.hook.as_mut(), teacher_before.as_ref()) {
                h(&StepEvent {
                    step,
                    momentum: momentum as f32,
                    teacher_before: tb,
                    student: &student,
                    teacher: &teacher,
                    report: &report,
                });
            }
            log.push(TrainRecord {
                epoch,
                step,
                lr,
                momentum,
                teacher_temp,
                image_loss: report.image_loss,
                patch_loss: report.patch_loss,
                koleo_loss: report.koleo_loss,
                sup_loss: report.sup_loss,
                total: report.total,
            });
            step += 1;
        }
        finished_epoch = epoch + 1;
        if let (Some(cd), Some(lp)) = (&ckpt_dir, &log_path) {
            let ck = make_checkpoint(step, cfg, label_names, finished_epoch, &rng, &student, &teacher, &opt)?;
            save_checkpoint(&ck, cd)?;
            write_log(lp, &log)?;
        }
    }
    let checkpoint = make_checkpoint(step, cfg, label_names, finished_epoch, &rng, &student, &teacher, &opt)?;
    if let (Some(cd), Some(lp)) = (&ckpt_dir, &log_path) {
        save_checkpoint(&checkpoint, cd)?;
        write_log(lp, &log)?;
    }
    Ok(PretrainOutput {
        student,
        teacher,
        log,
        checkpoint,
    })
}

#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
流水线运行器
按运行配置构建数据、模型与优化器，逐 epoch 训练并写出指标、鲁棒性扫描与检查点
支持 baseline / adversarial-baseline / defense / distill / multitask 五种流水线
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from great.core.attacks import adversarial_training_step, robustness_sweep
from great.core.data import (
    Dataset, augment_batch, image_multitask_suite, iterate_batches, load_dataset, synthetic_two_task,
)
from great.core.defense import StepAborted, defense_train_step, gradient_classifier_accuracy
from great.core.distill import (
    build_discriminator, distill_train_step, heldout_discriminator_accuracy, soft_target_baseline_step,
)
from great.core.metrics_manager import MetricsManager
from great.core.models import RunConfig, Schedule, ScheduleValue
from great.core.multitask import (
    GalBank, MultitaskOptimizers, TaskSet, TaskSpec, build_gal_optimizer, evaluate_multitask,
    multitask_train_step, task_classifier_accuracy,
)
from great.core.net import (
    Model, MultiHeadModel, Optimizer, build_aux_classifier, build_mlp, build_multitask_image_model,
    build_optimizer, build_resnet_small, build_two_task_model, evaluate_accuracy, load_checkpoint,
    save_checkpoint, supervised_step,
)
from great.core.tape import NonFiniteError

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, int, str], None]
StepFn = Callable[[np.ndarray, np.ndarray, ScheduleValue], Dict[str, float]]


@dataclass
class RunResult:
    """一次运行的产物路径与最终指标"""
    output_dir: str
    metrics_path: str
    config_path: str
    checkpoint_paths: List[str] = field(default_factory=list)
    sweep_path: Optional[str] = None
    final_metrics: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "output_dir": self.output_dir,
            "metrics_path": self.metrics_path,
            "config_path": self.config_path,
            "checkpoint_paths": list(self.checkpoint_paths),
            "sweep_path": self.sweep_path,
            "final_metrics": dict(self.final_metrics),
        }


def _mean_rows(rows: List[Dict[str, Any]]) -> Dict[str, float]:
    """批内指标取均值；全空的列丢弃"""
    frame = pd.DataFrame(rows)
    means = frame.mean(numeric_only=True)
    return OrderedDict((k, float(v)) for k, v in means.items() if not np.isnan(v))


class PipelineRunner:
    """单次实验运行器，所有随机性都由 config.seed 派生"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.metrics = MetricsManager(config.output_dir)
        self.epoch = 0
        self.schedule_value: Optional[ScheduleValue] = None

    # ------------------------------------------------------------ 入口

    def run(self, progress_callback: Optional[ProgressCallback] = None) -> RunResult:
        """
        运行配置中的流水线

        Args:
            progress_callback: 进度回调函数 (current, total, message)

        Raises:
            StepAborted: 训练步出现非有限值，诊断记录已写入运行目录
        """
        config = self.config
        logger.info(f"🚀 开始运行 {config.pipeline} ({config.label}), seed={config.seed}")
        config_path = self.metrics.save_config(config)
        runners = {
            "baseline": self._run_baseline,
            "adversarial-baseline": self._run_adversarial_baseline,
            "defense": self._run_defense,
            "distill": self._run_distill,
            "multitask": self._run_multitask,
        }
        try:
            rows, checkpoints, sweep_path = runners[config.pipeline](progress_callback)
        except (StepAborted, NonFiniteError) as e:
            report = getattr(e, "report", {}) or {}
            self.metrics.save_diagnostic({
                "pipeline": config.pipeline, "method": config.label, "seed": config.seed,
                "epoch": self.epoch, "error": str(e), "report": report,
            })
            if isinstance(e, StepAborted):
                raise
            raise StepAborted(str(e), report) from e

        metrics_path = self.metrics.save_metrics(rows)
        logger.info(f"✅ 运行完成: {config.output_dir}")
        return RunResult(
            output_dir=config.output_dir,
            metrics_path=metrics_path,
            config_path=config_path,
            checkpoint_paths=checkpoints,
            sweep_path=sweep_path,
            final_metrics=dict(rows[-1]) if rows else {},
        )

    # ------------------------------------------------------------ 构建

    def _schedule(self, epochs: Optional[int] = None) -> Schedule:
        config = self.config
        return Schedule(
            e_max=epochs or config.training.epochs,
            exponent=config.training.exponent,
            alpha_max=config.defense.alpha_max,
            beta_max=config.defense.beta_max,
            base_lr=config.optimizer.lr,
        )

    def _optimizer(self, params, lr_ratio: float = 1.0) -> Optimizer:
        opt = self.config.optimizer
        return build_optimizer(opt.kind, params, opt.lr * lr_ratio, opt.momentum, opt.weight_decay)

    def _classifier(self, dataset: Dataset, seed: int, width: Optional[int] = None) -> Model:
        """按 model 配置构建分类网络"""
        model = self.config.model
        if model.builder == "mlp":
            hidden = model.hidden if width is None else [2 * h for h in model.hidden]
            return build_mlp(dataset.input_shape, hidden, dataset.classes, seed=seed)
        if model.builder != "resnet_small":
            raise ValueError(f"未知模型构建器: {model.builder}")
        return build_resnet_small(dataset.input_shape, dataset.classes, width or model.width,
                                  model.blocks, seed=seed)

    def _aux_network(self, dataset: Dataset) -> Model:
        """梯度分类器：输入为与图像同形的梯度张量"""
        model = self.config.model
        seed = self.config.seed + 1
        if model.builder == "mlp":
            return build_mlp(dataset.input_shape, model.hidden, dataset.classes, "leaky_relu", 0.2, seed)
        return build_aux_classifier(dataset.input_shape, dataset.classes, model.width, model.blocks, seed)

    def _eval_split(self, dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
        n = self.config.attacks.n_eval
        return dataset.x_test[:n], dataset.y_test[:n]

    # ------------------------------------------------------------ 通用分类训练循环

    def _train_loop(self, model: Model, dataset: Dataset, optimizers: List[Optimizer], step: StepFn,
                    epoch_eval: Optional[Callable[[], Dict[str, float]]] = None,
                    progress_callback: Optional[ProgressCallback] = None,
                    rng: Optional[np.random.Generator] = None, epochs: Optional[int] = None,
                    tag: str = "") -> List[Dict[str, Any]]:
        """逐 epoch 设定学习率乘子与 α/β，按批调用 step，并记录测试准确率"""
        config = self.config
        epochs = epochs or config.training.epochs
        schedule = self._schedule(epochs)
        rng = rng or np.random.default_rng(config.seed)
        x_eval, y_eval = self._eval_split(dataset)
        rows = []
        for epoch in range(epochs):
            self.epoch = epoch
            value = self.schedule_value = schedule.training_value(epoch)
            for optimizer in optimizers:
                optimizer.set_lr_multiplier(value.lr_multiplier)
            step_rows = []
            for index in iterate_batches(len(dataset.x_train), config.training.batch_size, rng):
                xb, yb = dataset.x_train[index], dataset.y_train[index]
                if config.dataset.augment and xb.ndim == 4:
                    xb = augment_batch(xb, rng)
                step_rows.append(step(xb, yb, value))
            row: Dict[str, Any] = OrderedDict([("epoch", epoch), ("lr_multiplier", value.lr_multiplier)])
            row.update(_mean_rows(step_rows))
            row["test_accuracy"] = evaluate_accuracy(model, x_eval, y_eval)
            if epoch_eval is not None:
                row.update(epoch_eval())
            rows.append(row)
            loss = next((row[k] for k in ("train_loss", "main_loss", "student_loss") if k in row), float("nan"))
            logger.info(f"📊 {tag or config.label} epoch {epoch + 1}/{epochs}: train_loss={loss:.4f} "
                        f"test_accuracy={row['test_accuracy']:.4f}")
            if progress_callback:
                progress_callback(epoch + 1, epochs, f"{tag or config.label} epoch {epoch + 1}")
        return rows

    def _finish_classifier(self, model: Model, dataset: Dataset) -> Tuple[List[str], str]:
        """保存最终检查点并在评估子集上做鲁棒性扫描"""
        config = self.config
        checkpoint = self.metrics.save_checkpoint(model, config.seed, self.epoch + 1,
                                                  dataset=config.dataset.to_dict())
        x_eval, y_eval = self._eval_split(dataset)
        sweep = robustness_sweep(model, x_eval, y_eval, config.attacks.epsilons,
                                 config.attacks.build_specs(), method=config.label, seed=config.seed)
        return [checkpoint], self.metrics.save_sweep(sweep)

    # ------------------------------------------------------------ 各流水线

    def _run_baseline(self, progress_callback):
        dataset = load_dataset(self.config.dataset)
        model = self._classifier(dataset, self.config.seed)
        optimizer = self._optimizer(model.parameters())

        def step(xb, yb, value):
            loss, accuracy = supervised_step(model, xb, yb, optimizer)
            return {"train_loss": loss, "train_accuracy": accuracy}

        rows = self._train_loop(model, dataset, [optimizer], step, progress_callback=progress_callback)
        return (rows,) + self._finish_classifier(model, dataset)

    def _run_adversarial_baseline(self, progress_callback):
        dataset = load_dataset(self.config.dataset)
        model = self._classifier(dataset, self.config.seed)
        optimizer = self._optimizer(model.parameters())
        epsilon = self.config.attacks.adversarial_epsilon

        def step(xb, yb, value):
            loss, accuracy = adversarial_training_step(model, xb, yb, optimizer, epsilon)
            return {"train_loss": loss, "train_accuracy": accuracy}

        rows = self._train_loop(model, dataset, [optimizer], step, progress_callback=progress_callback)
        return (rows,) + self._finish_classifier(model, dataset)

    def _run_defense(self, progress_callback):
        config = self.config
        dataset = load_dataset(config.dataset)
        model = self._classifier(dataset, config.seed)
        aux = self._aux_network(dataset)
        main_optimizer = self._optimizer(model.parameters())
        aux_optimizer = self._optimizer(aux.parameters())
        x_eval, y_eval = self._eval_split(dataset)

        def step(xb, yb, value):
            report = defense_train_step(model, aux, xb, yb, config.defense, value.alpha, value.beta,
                                        main_optimizer, aux_optimizer)
            row = report.to_dict()
            for index, norm in enumerate(row.pop("probe_norms")):
                row[f"probe_norm_{index}"] = norm
            return row

        def epoch_eval():
            return {"aux_heldout_accuracy": gradient_classifier_accuracy(
                model, aux, x_eval, y_eval, config.defense.masked, config.defense.normalize_gradients,
                beta=self.schedule_value.beta)}

        rows = self._train_loop(model, dataset, [main_optimizer, aux_optimizer], step, epoch_eval,
                                progress_callback)
        checkpoints, sweep_path = self._finish_classifier(model, dataset)
        aux_path = self.metrics.path("aux.ckpt")
        save_checkpoint(aux_path, aux, config.seed + 1, self.epoch + 1)
        return rows, checkpoints + [aux_path], sweep_path

    def _teacher(self, dataset: Dataset, progress_callback) -> Tuple[Model, Optional[str]]:
        """载入教师检查点；未提供时在完整训练集上先训练一个更宽的教师"""
        config = self.config
        if config.distill.teacher_checkpoint:
            teacher, header = load_checkpoint(config.distill.teacher_checkpoint)
            logger.info(f"✅ 已载入教师 {config.distill.teacher_checkpoint} (step {header.get('step')})")
            return teacher, None
        teacher = self._classifier(dataset, config.seed + 100, width=config.distill.teacher_width)
        optimizer = self._optimizer(teacher.parameters())

        def step(xb, yb, value):
            loss, accuracy = supervised_step(teacher, xb, yb, optimizer)
            return {"train_loss": loss, "train_accuracy": accuracy}

        self._train_loop(teacher, dataset, [optimizer], step, progress_callback=progress_callback,
                         rng=np.random.default_rng(config.seed + 100),
                         epochs=config.distill.teacher_epochs, tag="teacher")
        path = self.metrics.path("teacher.ckpt")
        save_checkpoint(path, teacher, config.seed + 100, config.distill.teacher_epochs,
                        {"dataset": config.dataset.to_dict()})
        return teacher, path

    def _run_distill(self, progress_callback):
        config = self.config
        settings = config.distill
        full = load_dataset(config.dataset)
        teacher, teacher_path = self._teacher(full, progress_callback)
        dataset = full if settings.fraction >= 1.0 else full.subsample(settings.fraction, config.seed)
        logger.info(f"📊 学生训练样本 {len(dataset.x_train)} (fraction={settings.fraction})")

        student = self._classifier(dataset, config.seed)
        student_optimizer = self._optimizer(student.parameters())
        optimizers = [student_optimizer]
        x_eval, y_eval = self._eval_split(dataset)
        epoch_eval = None

        if settings.method == "great":
            discriminator = build_discriminator(student.descriptor, seed=config.seed + 7)
            disc_optimizer = self._optimizer(discriminator.parameters())
            optimizers.append(disc_optimizer)

            def step(xb, yb, value):
                return distill_train_step(student, teacher, discriminator, xb, yb, settings,
                                          student_optimizer, disc_optimizer).to_dict()

            def epoch_eval():
                return {"disc_heldout_accuracy": heldout_discriminator_accuracy(
                    student, teacher, discriminator, x_eval, y_eval, settings.standardize_gradients,
                    config.training.batch_size)}
        elif settings.method == "soft_target":
            def step(xb, yb, value):
                return soft_target_baseline_step(student, teacher, xb, yb, settings.temperature,
                                                 settings.mix, student_optimizer).to_dict()
        else:
            def step(xb, yb, value):
                loss, _ = supervised_step(student, xb, yb, student_optimizer)
                return {"student_loss": loss}

        rows = self._train_loop(student, dataset, optimizers, step, epoch_eval, progress_callback)
        checkpoints, sweep_path = self._finish_classifier(student, dataset)
        if teacher_path:
            checkpoints.append(teacher_path)
        return rows, checkpoints, sweep_path

    def _multitask_setup(self) -> Tuple[Dataset, MultiHeadModel, TaskSet, Dict, Dict]:
        config = self.config
        settings = config.multitask
        if settings.suite == "two_task":
            dataset = synthetic_two_task(settings.n_train, settings.scale, config.seed, settings.input_dim,
                                         n_test=settings.n_test)
            model = build_two_task_model(settings.input_dim, settings.feature_dim, seed=config.seed)
            task_set = TaskSet([TaskSpec("task_1", "mse"), TaskSpec("task_2", "mse")])
            train, test = dict(dataset.targets_train), dict(dataset.targets_test)
        else:
            dataset = image_multitask_suite(settings.n_train, config.seed, config.dataset.shape[-1],
                                            config.dataset.classes, settings.n_test)
            model = build_multitask_image_model(dataset.input_shape, config.dataset.classes,
                                                config.model.width, seed=config.seed)
            task_set = TaskSet([TaskSpec("classification", "cross_entropy"),
                                TaskSpec("reconstruction", "mse"), TaskSpec("edges", "mse")])
            train = dict(dataset.targets_train, classification=dataset.y_train)
            test = dict(dataset.targets_test, classification=dataset.y_test)
        return dataset, model, task_set, train, test

    def _task_classifier(self, feature_shape, count: int) -> Model:
        seed = self.config.seed + 10
        if len(feature_shape) == 1:
            return build_mlp(feature_shape, [32], count, "leaky_relu", 0.2, seed)
        return build_resnet_small(feature_shape, count, self.config.model.width, 1, "leaky_relu", 0.2, seed)

    def _run_multitask(self, progress_callback):
        config = self.config
        settings = config.multitask
        dataset, model, task_set, train_targets, test_targets = self._multitask_setup()
        gals = GalBank(task_set.names, model.feature_shape, settings.gal_floor)
        classifier = None
        if settings.gal_mode != "off":
            classifier = self._task_classifier(model.feature_shape, len(task_set))
        optimizers = MultitaskOptimizers(
            encoder=self._optimizer(model.encoder.parameters()),
            decoders=OrderedDict((name, self._optimizer(decoder.parameters()))
                                 for name, decoder in model.decoders.items()),
            classifier=(self._optimizer(classifier.parameters(), settings.classifier_lr_ratio)
                        if classifier else None),
            gal=build_gal_optimizer(gals, config.optimizer.lr, settings.gal_lr_ratio),
        )
        schedule = Schedule(e_max=config.training.epochs, exponent=config.training.exponent,
                            base_lr=config.optimizer.lr)
        rng = np.random.default_rng(config.seed)
        n_eval = config.attacks.n_eval
        x_eval = dataset.x_test[:n_eval]
        eval_targets = {k: v[:n_eval] for k, v in test_targets.items()}

        rows = []
        for epoch in range(config.training.epochs):
            self.epoch = epoch
            value = schedule.training_value(epoch)
            # 分类器先在 γ≡1 上学会区分任务，γ 的步长随后按 ramp 增大
            optimizers.set_lr_multiplier(value.lr_multiplier, value.ramp)
            step_rows = []
            for index in iterate_batches(len(dataset.x_train), config.training.batch_size, rng):
                targets = {k: v[index] for k, v in train_targets.items()}
                report = multitask_train_step(model, gals, classifier, task_set, dataset.x_train[index],
                                              targets, optimizers, settings.gal_mode)
                step_rows.append(report.to_dict())
            row: Dict[str, Any] = OrderedDict([("epoch", epoch), ("lr_multiplier", value.lr_multiplier),
                                               ("gal_lr_multiplier", value.ramp), ("gamma_min", gals.minimum())])
            row.update(_mean_rows(step_rows))
            row.update(evaluate_multitask(model, task_set, x_eval, eval_targets))
            if classifier is not None:
                row["task_classifier_heldout_accuracy"] = task_classifier_accuracy(
                    model, gals, classifier, task_set, x_eval, eval_targets)
            rows.append(row)
            logger.info(f"📊 {config.label} epoch {epoch + 1}/{config.training.epochs}: "
                        f"combined_norm_loss={row.get('test_combined_norm_loss', float('nan')):.4f}")
            if progress_callback:
                progress_callback(epoch + 1, config.training.epochs, f"{config.label} epoch {epoch + 1}")

        checkpoints = [self.metrics.save_checkpoint(model.encoder, config.seed, self.epoch + 1,
                                                    name="encoder.ckpt")]
        for name, decoder in model.decoders.items():
            checkpoints.append(self.metrics.save_checkpoint(decoder, config.seed, self.epoch + 1,
                                                            name=f"decoder_{name}.ckpt"))
        return rows, checkpoints, None


def run_pipeline(config: RunConfig, progress_callback: Optional[ProgressCallback] = None) -> RunResult:
    """便捷入口，供并行进程调用"""
    return PipelineRunner(config).run(progress_callback)

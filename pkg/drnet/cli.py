"""Command-line entry point: ``drnet <subcommand> [flags]``.

Global flags go before the subcommand::

    drnet --config run.ini --seed 7 preprocess --in raw/ --out prep/
    drnet train --train prep/train.csv --val prep/val.csv --preprocessed --out run/
    drnet quantize --model run/model.drcnn --calib prep/ --preprocessed --out q.drcnn
    drnet eval --model q.drcnn --manifest prep/test.csv --preprocessed --strict-safety
"""
import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from drnet import __version__
from drnet.augment import augment, sample_rng
from drnet.config import apply_overrides, build_model_config, config_hash, load_config
from drnet.container import KIND_FLOAT, container_kind
from drnet.dataset import (Manifest, SplitSpec, apply_exclusions, balanced_split, class_weights, load_exclusions,
                           load_manifest, write_manifest, write_synthetic_dataset)
from drnet.errors import DRNetError, InvalidArgument
from drnet.evaluation import compare_reports, confusion, metrics, prediction_agreement, render_text, report_to_dict
from drnet.imageproc import is_preprocessed_plane, load_tensor, preprocess, read_rgb, write_plane
from drnet.inference import benchmark, infer_float, infer_int8
from drnet.network import init_model, load_model, param_count, save_model
from drnet.quantize import calibrate, load_qmodel, quantize_model, save_qmodel
from drnet.training import Split, fit
from drnet.utils import to_uint8

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.ppm', '.pgm', '.tif', '.tiff', '.bmp')


# Inputs

def _list_images(source):
    """Image paths and labels (or `None`) of a directory, a manifest CSV or a single file."""
    if os.path.isdir(source):
        names = sorted(name for name in os.listdir(source) if name.lower().endswith(IMAGE_SUFFIXES))
        return [(os.path.join(source, name), None) for name in names]
    if source.lower().endswith('.csv'):
        return [(path, label) for path, label in _resolved(load_manifest(source), source)]
    return [(source, None)]


def _resolved(manifest, manifest_path):
    root = os.path.dirname(os.path.abspath(manifest_path))
    return [(path if os.path.isabs(path) else os.path.join(root, path), label) for path, label in manifest.records]


def _map(fn, items, workers):
    """Applies ``fn`` to every item on a thread pool; results keep the input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_tensors(entries, args, cfg):
    paths = [path for path, _ in entries]
    tensors = _map(lambda path: load_tensor(path, cfg.preprocess, args.preprocessed), paths, args.workers)
    return np.concatenate(tensors) if tensors else np.empty((0,))


def _load_split(manifest_path, args, cfg):
    entries = _list_images(manifest_path)
    if not entries:
        raise InvalidArgument(f'{manifest_path} lists no images.')
    if any(label is None for _, label in entries):
        raise InvalidArgument(f'{manifest_path} must be a manifest CSV with labels.')
    return Split(_load_tensors(entries, args, cfg), np.array([label for _, label in entries], dtype=np.int64))


def _load_any_model(path):
    if container_kind(path) == KIND_FLOAT:
        return KIND_FLOAT, load_model(path)
    return 'Q', load_qmodel(path)


def _predict(kind, model, images, batch_size=32):
    infer = infer_float if kind == KIND_FLOAT else infer_int8
    probs, classes = [], []
    for start in range(0, images.shape[0], batch_size):
        p, c = infer(model, images[start:start + batch_size])
        probs.append(p)
        classes.append(c)
    return np.concatenate(probs), np.concatenate(classes)


# Outputs

def _out_dir(args, cfg):
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    return out


def _out_file(args, cfg, default_name):
    """``--out`` names the file when it has a suffix, otherwise the directory holding ``default_name``."""
    out = args.out or cfg.out
    if os.path.splitext(out)[1]:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        return out
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, default_name)


def _provenance(cfg):
    return {'version': __version__, 'config_hash': config_hash(cfg)}


def _write_json(path, payload):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


# Subcommands

def cmd_preprocess(args, cfg):
    entries = _list_images(args.input)
    out = _out_dir(args, cfg)
    base = args.input if os.path.isdir(args.input) else None

    def work(path):
        name = os.path.splitext(os.path.basename(path) if base is None else os.path.relpath(path, base))[0] + '.png'
        target = os.path.join(out, name)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        write_plane(target, preprocess(read_rgb(path), cfg.preprocess))
        log.debug('Preprocessed %s -> %s', path, target)
        return os.path.relpath(target, out)

    names = _map(work, [path for path, _ in entries], args.workers)
    if all(label is not None for _, label in entries) and entries:
        write_manifest(Manifest(tuple(zip(names, (label for _, label in entries))), f'preprocessed {args.input}'),
                       os.path.join(out, 'manifest.csv'))
    log.info('Preprocessed %d images into %s', len(names), out)
    return 0


def cmd_augment_preview(args, cfg):
    out = _out_dir(args, cfg)
    tensor = load_tensor(args.image, cfg.preprocess, args.preprocessed)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    for epoch in range(args.count):
        t = augment(tensor, sample_rng(cfg.augment.seed, args.index, epoch), cfg.augment)
        write_plane(os.path.join(out, f'{stem}_aug{epoch:03d}.png'), to_uint8(t[0, :, :, 0] * 255))
    log.info('Wrote %d augmented variants of %s', args.count, args.image)
    return 0


def cmd_split(args, cfg):
    manifest = load_manifest(args.manifest)
    if args.exclude:
        manifest = apply_exclusions(manifest, load_exclusions(args.exclude))
    manifest = Manifest(tuple(_resolved(manifest, args.manifest)), manifest.provenance)
    spec = cfg.split
    parts = balanced_split(manifest, SplitSpec(spec.train if args.train is None else args.train,
                                               spec.val if args.val is None else args.val,
                                               spec.test if args.test is None else args.test, spec.seed))
    out = _out_dir(args, cfg)
    report = dict(_provenance(cfg), source_counts=manifest.counts(),
                  source_weights=class_weights(manifest).tolist() if len(manifest) else None)
    for name, part in zip(('train', 'val', 'test'), parts):
        write_manifest(part, os.path.join(out, f'{name}.csv'))
        report[name] = len(part)
    _write_json(os.path.join(out, 'split.json'), report)
    log.info('Split %d images into train=%d val=%d test=%d', len(manifest), report['train'], report['val'],
             report['test'])
    return 0


def cmd_train(args, cfg):
    cfg = apply_overrides(cfg, {'train.epochs': args.epochs, 'train.batch_size': args.batch_size})
    out = _out_dir(args, cfg)
    train, val = _load_split(args.train, args, cfg), _load_split(args.val, args, cfg)
    config = build_model_config(cfg.model)
    model = init_model(config, seed=cfg.model.init_seed)
    log.info('Model with %d parameters', param_count(config))
    checkpoint_path = os.path.join(out, 'checkpoint.drcnn')

    def checkpoint(best, state, epoch):
        save_model(best, checkpoint_path, optimizer_state=state)

    best, history = fit(model, train, val, cfg.train, None if args.no_augment else cfg.augment, checkpoint)
    size = save_model(best, os.path.join(out, 'model.drcnn'))
    history.to_csv(os.path.join(out, 'history.csv'))
    _write_json(os.path.join(out, 'train.json'), dict(
        _provenance(cfg), epochs=len(history), best_acc=max(history.best_acc, default=None),
        initial_val_acc=history.initial_val_acc, model_bytes=size, parameters=param_count(config)))
    if args.plots:
        _plot(lambda viz: viz.visualize_history(history), os.path.join(out, 'history.png'))
    return 0


def cmd_quantize(args, cfg):
    model = load_model(args.model)
    entries = _list_images(args.calib)[:args.limit]
    samples = _load_tensors(entries, args, cfg)
    ranges = calibrate(model, samples)
    qmodel = quantize_model(model, ranges)
    target = _out_file(args, cfg, 'model_int8.drcnn')
    size = save_qmodel(qmodel, target)
    log.info('Wrote %s (%d bytes) calibrated on %d samples', target, size, ranges.samples)
    return 0


def cmd_infer(args, cfg):
    kind, model = _load_any_model(args.model)
    tensor = load_tensor(args.image, cfg.preprocess, args.preprocessed)
    start = time.perf_counter()
    probs, classes = (infer_float if kind == KIND_FLOAT else infer_int8)(model, tensor)
    latency = (time.perf_counter() - start) * 1000
    print(json.dumps({'class': int(classes[0]), 'probs': probs[0].tolist(), 'latency_ms': latency,
                      'model': 'float32' if kind == KIND_FLOAT else 'int8'}))
    return 0


def _evaluate(path, images, labels):
    kind, model = _load_any_model(path)
    _, preds = _predict(kind, model, images)
    return metrics(confusion(preds, labels)), preds


def cmd_eval(args, cfg):
    out = _out_dir(args, cfg)
    split = _load_split(args.manifest, args, cfg)
    report, preds = _evaluate(args.model, split.images, split.labels)
    payload = dict(_provenance(cfg), model=args.model, report=report_to_dict(report))
    text = render_text(report, f'Evaluation of {args.model}')
    if args.compare:
        other, other_preds = _evaluate(args.compare, split.images, split.labels)
        payload['compare'] = dict(model=args.compare, report=report_to_dict(other),
                                  delta=compare_reports(other, report),
                                  agreement=prediction_agreement(preds, other_preds))
        text += '\n' + render_text(other, f'Evaluation of {args.compare}')
    _write_json(os.path.join(out, 'report.json'), payload)
    with open(os.path.join(out, 'report.txt'), 'w', encoding='utf-8') as handle:
        handle.write(text)
    with open(os.path.join(out, 'predictions.csv'), 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['path', 'label', 'prediction'])
        for (path, label), pred in zip(_list_images(args.manifest), preds):
            writer.writerow([path, label, int(pred)])
    if args.plots:
        _plot(lambda viz: viz.visualize_confusion(report), os.path.join(out, 'confusion.png'))
    sys.stdout.write(text)
    if args.strict_safety and report.critical_misdiagnoses > 0:
        log.error('%d stage 3/4 cases were predicted as no DR', report.critical_misdiagnoses)
        return 1
    return 0


def cmd_bench(args, cfg):
    if container_kind(args.model) == KIND_FLOAT:
        raise InvalidArgument(f'{args.model} is a float model; bench measures the int8 path.')
    qmodel = load_qmodel(args.model)
    entries = _list_images(args.images)[:args.limit]
    raw = None
    if args.preprocessed or all(is_preprocessed_plane(path, cfg.preprocess) for path, _ in entries):
        tensors = [load_tensor(path, cfg.preprocess, True) for path, _ in entries]
    else:
        raw = [read_rgb(path) for path, _ in entries]
        tensors = [load_tensor(path, cfg.preprocess) for path, _ in entries]
    repetitions = args.repetitions or cfg.bench.repetitions
    report = benchmark(qmodel, tensors, repetitions, cfg.bench.warmup, os.path.getsize(args.model), raw,
                       cfg.preprocess)
    payload = dict(_provenance(cfg), **report.to_dict())
    _write_json(os.path.join(_out_dir(args, cfg), 'bench.json'), payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_synth(args, cfg):
    out = _out_dir(args, cfg)
    manifest = write_synthetic_dataset(out, args.per_class, args.side, cfg.split.seed)
    log.info('Wrote %d synthetic images to %s', len(manifest), out)
    return 0


def _plot(draw, path):
    try:
        from drnet_visualizer import Visualizer
    except ImportError:
        log.warning('matplotlib is not installed; skipping %s', path)
        return
    Visualizer.use_headless_backend()
    Visualizer.save_figure(draw(Visualizer), path)


# Parser

def build_parser():
    parser = argparse.ArgumentParser(prog='drnet', description='Diabetic-retinopathy staging toolkit.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--config', help='INI-style configuration file')
    parser.add_argument('--seed', type=int, help='seed of every random stream')
    parser.add_argument('--workers', type=int, default=1, help='worker threads of per-image stages')
    parser.add_argument('-v', '--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command', required=True, metavar='command')

    def command(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument('--out', help='output directory (or file, for quantize)')
        sub.set_defaults(handler=handler)
        return sub

    def preprocessed_flag(sub):
        sub.add_argument('--preprocessed', action='store_true', help='inputs already are preprocessed planes')

    sub = command('preprocess', cmd_preprocess, 'preprocess fundus images into 8-bit planes')
    sub.add_argument('--in', dest='input', required=True, help='image directory, manifest CSV or image')

    sub = command('augment-preview', cmd_augment_preview, 'write augmented variants of one image')
    sub.add_argument('--image', required=True)
    sub.add_argument('--count', type=int, default=8)
    sub.add_argument('--index', type=int, default=0, help='image index keying the random stream')
    preprocessed_flag(sub)

    sub = command('split', cmd_split, 'class-balanced train/val/test split of a manifest')
    sub.add_argument('--manifest', required=True)
    sub.add_argument('--exclude', help='exclusion list, one path per line')
    for name in ('train', 'val', 'test'):
        sub.add_argument(f'--{name}', type=int, help=f'{name} images per class')

    sub = command('train', cmd_train, 'train the float model')
    sub.add_argument('--train', required=True, help='training manifest')
    sub.add_argument('--val', required=True, help='validation manifest')
    sub.add_argument('--epochs', type=int)
    sub.add_argument('--batch-size', type=int)
    sub.add_argument('--no-augment', action='store_true')
    sub.add_argument('--plots', action='store_true', help='also write history.png (needs matplotlib)')
    preprocessed_flag(sub)

    sub = command('quantize', cmd_quantize, 'calibrate and quantize a float model to int8')
    sub.add_argument('--model', required=True)
    sub.add_argument('--calib', required=True, help='representative images: directory or manifest')
    sub.add_argument('--limit', type=int, default=200, help='maximum number of calibration images')
    preprocessed_flag(sub)

    sub = command('infer', cmd_infer, 'classify one image')
    sub.add_argument('--model', required=True)
    sub.add_argument('--image', required=True)
    preprocessed_flag(sub)

    sub = command('eval', cmd_eval, 'evaluate a model on a labelled manifest')
    sub.add_argument('--model', required=True)
    sub.add_argument('--manifest', required=True)
    sub.add_argument('--compare', help='second model to compare against')
    sub.add_argument('--strict-safety', action='store_true', help='exit 1 on any stage 3/4 predicted as 0')
    sub.add_argument('--plots', action='store_true', help='also write confusion.png (needs matplotlib)')
    preprocessed_flag(sub)

    sub = command('bench', cmd_bench, 'measure int8 inference latency')
    sub.add_argument('--model', required=True)
    sub.add_argument('--images', required=True, help='image directory or manifest')
    sub.add_argument('--limit', type=int, default=8)
    sub.add_argument('--repetitions', type=int)
    preprocessed_flag(sub)

    sub = command('synth', cmd_synth, 'write a synthetic, non-clinical dataset')
    sub.add_argument('--per-class', type=int, default=10)
    sub.add_argument('--side', type=int, default=256)
    return parser


def run(argv=None):
    """Parses ``argv`` and runs the subcommand.

    Returns:
        int: 0 on success, 1 on a pipeline failure, 2 on a usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return exit_.code if isinstance(exit_.code, int) else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        cfg = apply_overrides(load_config(args.config), {'seed': args.seed})
        return args.handler(args, cfg)
    except (DRNetError, OSError) as error:
        log.error('%s failed: %s', args.command, error)
        return 1


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()

"""
Main entry point for the dense face alignment pipeline.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional

import numpy as np

from dense_face_alignment.config import (
    apply_overrides,
    datagen_config,
    load_config,
    model_config,
    network_spec,
    solver_options,
    train_schedule,
    validate_config,
    write_resolved_config,
)
from dense_face_alignment.datagen import (
    PairDataset,
    benchmark_directory,
    compute_gt_correspondence,
    generate_dataset,
    list_benchmark,
    read_flow,
    write_flow,
)
from dense_face_alignment.errors import ConfigError, DataError, DenseFaceError, TrainingDiverged
from dense_face_alignment.evalkit import bucket_by_yaw, flow_epe, nms, read_annotation, write_per_image_csv
from dense_face_alignment.facemodel import MorphableModel
from dense_face_alignment.fit import (
    flow_to_correspondences,
    initial_parameters,
    landmarks_2d,
    recover_dense,
    solve,
    write_parameters,
)
from dense_face_alignment.flownet import Weights, predict, read_weights, write_weights
from dense_face_alignment.flowviz import draw_landmarks, draw_wireframe, flow_to_color, match_to_gray
from dense_face_alignment.model_io import read_model, write_model
from dense_face_alignment.procedural import generate_model
from dense_face_alignment.raster import (
    BackgroundBank,
    rasterize,
    read_image,
    render_target_template,
    sample_scene,
    write_image,
)
from dense_face_alignment.training import train

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)]
)
logger = logging.getLogger(__name__)


def parse_arguments(argv: Optional[List[str]] = None):
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="Path to a YAML configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override a configuration value (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="Run seed")
    common.add_argument("--output-dir", type=str, default=None, help="Directory for all outputs")
    common.add_argument("--threads", type=int, default=None, help="Worker threads")
    common.add_argument("--debug", action="store_true", help="Enable debug logging")

    parser = argparse.ArgumentParser(description="Dense face correspondence and morphable-model alignment")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("genmodel", parents=[common], help="Generate a procedural morphable model")
    sub.add_parser("gendata", parents=[common], help="Generate training pairs or a benchmark set")
    train_parser = sub.add_parser("train", parents=[common], help="Train the correspondence network")
    train_parser.add_argument("--stage", choices=["pretrain", "finetune", "both"], default=None,
                              help="Training stage(s) to run")
    fit_parser = sub.add_parser("fit", parents=[common], help="Fit the model to one image")
    fit_parser.add_argument("image", nargs="?", default=None, help="Input image (PNG)")
    fit_parser.add_argument("--weights", type=str, default=None, help="Network weights (DCWT)")
    fit_parser.add_argument("--no-network", action="store_true",
                            help="Skip the network; take flow from --gt-flow")
    fit_parser.add_argument("--gt-flow", type=str, default=None, help="Flow file (DCFL) to fit from")
    sub.add_parser("bench", parents=[common], help="Evaluate landmark accuracy on a benchmark set")
    sub.add_parser("render", parents=[common], help="Write diagnostic scene and flow renders")
    return parser.parse_args(argv)


def resolve_config(args) -> Dict[str, Any]:
    """Configuration file, then --set overrides, then the dedicated flags."""
    config = load_config(args.config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"run.output_dir={json.dumps(args.output_dir)}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if args.command == "train" and args.stage is not None:
        overrides.append(f"train.stage={args.stage}")
    if args.command == "fit":
        if args.image is not None:
            overrides.append(f"fit.image={json.dumps(args.image)}")
        if args.weights is not None:
            overrides.append(f"fit.weights={json.dumps(args.weights)}")
        if args.gt_flow is not None:
            overrides.append(f"fit.gt_flow={json.dumps(args.gt_flow)}")
        if args.no_network:
            overrides.append("fit.use_network=false")
    config = apply_overrides(config, overrides)
    validate_config(config)
    return config


def load_model(config: Dict[str, Any]) -> MorphableModel:
    """The model file named by run.model_path, or the procedural model of the model section."""
    path = config["run"]["model_path"]
    if path:
        return read_model(path)
    logger.info("No run.model_path given; generating the procedural model")
    return generate_model(model_config(config))


def cmd_genmodel(config: Dict[str, Any]) -> str:
    output_dir = config["run"]["output_dir"]
    model = generate_model(model_config(config))
    path = config["run"]["model_path"] or os.path.join(output_dir, "model.dcmm")
    write_model(model, path)
    summary = f"V={model.num_vertices} K_id={model.num_identity} K_exp={model.num_expression}"
    print(summary)
    logger.info(f"Wrote model {path}: {summary}")
    return path


def cmd_gendata(config: Dict[str, Any]) -> int:
    model = load_model(config)
    return generate_dataset(model, datagen_config(config), config["run"]["output_dir"], config["run"]["threads"])


def cmd_train(config: Dict[str, Any]) -> str:
    output_dir = config["run"]["output_dir"]
    schedule = train_schedule(config)
    spec = network_spec(config)
    datasets = {}
    for stage in schedule.stages:
        root = schedule.for_stage(stage).dataset
        if not root:
            raise ConfigError(f"train.{stage}.dataset must name a dataset directory")
        datasets[stage] = PairDataset(root)

    weights: Optional[Weights] = None
    if schedule.init_weights:
        weights = read_weights(schedule.init_weights)
        if weights.spec.input_size != spec.input_size or weights.spec.base_channels != spec.base_channels:
            raise ConfigError(f"Weights {schedule.init_weights} do not match the configured network")
        logger.info(f"Starting from weights {schedule.init_weights}")

    try:
        weights, log = train(spec, datasets, schedule, weights, config["run"]["threads"])
    except TrainingDiverged as e:
        if e.checkpoint is not None:
            path = os.path.join(output_dir, "diverged_checkpoint.dcwt")
            write_weights(path, e.checkpoint)
            logger.error(f"Saved last finite weights to {path}")
        raise

    path = os.path.join(output_dir, "weights.dcwt")
    write_weights(path, weights)
    log.write_csv(os.path.join(output_dir, "train_log.csv"))
    logger.info(f"Wrote weights {path}")
    return path


def _estimate_flow(config: Dict[str, Any], image: np.ndarray, model: MorphableModel,
                   weights: Optional[Weights], timings: Optional[List[float]] = None):
    if weights is None:
        path = config["fit"]["gt_flow"]
        if not path:
            raise ConfigError("fitting without the network needs fit.gt_flow (--gt-flow)")
        return read_flow(path)
    return predict(weights, image, model, timings)


def cmd_fit(config: Dict[str, Any]) -> str:
    output_dir = config["run"]["output_dir"]
    fit_section = config["fit"]
    options = solver_options(config)
    model = load_model(config)

    weights = None
    if fit_section["use_network"]:
        if not fit_section["weights"]:
            raise ConfigError("fitting with the network needs fit.weights (--weights)")
        weights = read_weights(fit_section["weights"])

    if not fit_section["image"]:
        raise ConfigError("fit needs an input image (fit.image)")
    image = read_image(fit_section["image"])
    height, width = image.shape[:2]
    image_size = (width, height)
    if weights is not None and weights.spec.input_size != image_size:
        raise DataError(
            f"Image is {width}x{height} but the network expects {weights.spec.input_size[0]}x{weights.spec.input_size[1]}"
        )
    flow, match = _estimate_flow(config, image, model, weights)
    if flow.shape[:2] != (height, width):
        raise DataError(f"Flow is {flow.shape[1]}x{flow.shape[0]}, image is {width}x{height}")

    template = render_target_template(model, image_size)
    correspondences = flow_to_correspondences(flow, match, template, model, options.match_threshold, options.stride)
    logger.info(f"{len(correspondences)} correspondences ({correspondences.dropped} dropped)")
    params, report = solve(correspondences, model, initial_parameters(model, image_size, options.init_face_fraction),
                           options)

    os.makedirs(output_dir, exist_ok=True)
    fit_path = os.path.join(output_dir, "fit.json")
    write_parameters(fit_path, params)
    with open(os.path.join(output_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=1)
    with open(os.path.join(output_dir, "fit_log.jsonl"), "a", encoding="utf-8") as f:
        f.write(json.dumps(dict(report.to_dict(), image=fit_section["image"])) + "\n")

    refined_flow, refined_mask = recover_dense(params, model, image_size, options.uv_threshold)
    write_flow(os.path.join(output_dir, "refined.dcfl"), refined_flow, refined_mask)
    overlay = draw_wireframe(image, model, params.coeffs, params.pose)
    overlay = draw_landmarks(overlay, landmarks_2d(params, model, image_size))
    write_image(os.path.join(output_dir, "overlay.png"), overlay)
    write_image(os.path.join(output_dir, "flow.png"), flow_to_color(flow, match >= options.match_threshold))
    logger.info(f"Wrote fit {fit_path}: yaw {params.pose.yaw:.3f}, pitch {params.pose.pitch:.3f}, "
                f"roll {params.pose.roll:.3f}, f {params.f:.1f}")
    return fit_path


def _bench_item(config: Dict[str, Any], root: str, index: int, model: MorphableModel,
                weights: Optional[Weights]) -> Dict[str, Any]:
    bench = config["bench"]
    options = solver_options(config)
    directory = benchmark_directory(root, index)
    image = read_image(os.path.join(directory, "image.png"))
    annotation = read_annotation(os.path.join(directory, "annotation.json"))
    gt_flow, gt_mask = read_flow(os.path.join(directory, "gt.dcfl"))
    height, width = image.shape[:2]
    image_size = (width, height)

    timings: List[float] = []
    if weights is None:
        flow, match = gt_flow, gt_mask
    else:
        flow, match = predict(weights, image, model, timings)
    template = render_target_template(model, image_size)
    correspondences = flow_to_correspondences(flow, match, template, model, options.match_threshold, options.stride)
    params, report = solve(correspondences, model, initial_parameters(model, image_size, options.init_face_fraction),
                           options)
    marks = landmarks_2d(params, model, image_size, names=list(annotation.points))
    pred = {name: (mark.x, mark.y) for name, mark in marks.items()}

    yaw = annotation.yaw if annotation.yaw is not None else params.pose.yaw
    row: Dict[str, Any] = {"index": index, "yaw_deg": float(np.degrees(yaw))}
    for subset in bench["subsets"]:
        try:
            row[f"nms_{subset}"] = nms(pred, annotation, subset)
        except ValueError:
            row[f"nms_{subset}"] = float("nan")
    row["rms"] = report.rms
    row["iterations"] = report.iterations
    row["converged"] = int(report.converged)
    if weights is not None:
        score = flow_epe(flow, match, gt_flow, gt_mask, bench["match_threshold"])
        row["epe"], row["precision"], row["recall"] = score.epe, score.precision, score.recall
    row["_predict_ms"] = timings[0] if timings else 0.0
    row["_fit_ms"] = report.wall_ms
    return row


def cmd_bench(config: Dict[str, Any]) -> str:
    bench = config["bench"]
    output_dir = config["run"]["output_dir"]
    root = bench["root"]
    if not root:
        raise ConfigError("bench.root must name a benchmark directory")
    indices = list_benchmark(root)
    model = load_model(config)
    weights = None
    if bench["mode"] == "network":
        if not bench["weights"]:
            raise ConfigError("bench in network mode needs bench.weights")
        weights = read_weights(bench["weights"])
    logger.info(f"Evaluating {len(indices)} benchmark images in {bench['mode']} mode")

    with ThreadPoolExecutor(max_workers=config["run"]["threads"]) as executor:
        rows = list(executor.map(lambda i: _bench_item(config, root, i, model, weights), indices))

    os.makedirs(output_dir, exist_ok=True)
    write_per_image_csv(os.path.join(output_dir, "per_image.csv"),
                        [{k: v for k, v in row.items() if not k.startswith("_")} for row in rows])
    for subset in bench["subsets"]:
        kept = [row for row in rows if not np.isnan(row[f"nms_{subset}"])]
        result = bucket_by_yaw([row[f"nms_{subset}"] for row in kept], [row["yaw_deg"] for row in kept])
        result.write_csv(os.path.join(output_dir, f"nms_{subset}.csv"))
        print(f"NMS ({subset})\n{result.to_table()}\n")

    runtime_path = os.path.join(output_dir, "runtime.txt")
    with open(runtime_path, "w", encoding="utf-8") as f:
        f.write(f"mean_predict_ms {np.mean([row['_predict_ms'] for row in rows]):.3f}\n")
        f.write(f"mean_fit_ms {np.mean([row['_fit_ms'] for row in rows]):.3f}\n")
    return os.path.join(output_dir, "per_image.csv")


def cmd_render(config: Dict[str, Any]) -> int:
    output_dir = config["run"]["output_dir"]
    model = load_model(config)
    datagen = datagen_config(config)
    backgrounds = BackgroundBank.from_config(datagen)
    template = render_target_template(model, datagen.size)
    os.makedirs(output_dir, exist_ok=True)
    write_image(os.path.join(output_dir, "template.png"), template.color)
    count = config["render"]["count"]
    for i in range(count):
        rng = np.random.default_rng([datagen.seed, i])
        scene = sample_scene(rng, datagen, model, backgrounds)
        render = rasterize(model, scene, datagen.size)
        flow, mask = compute_gt_correspondence(render, template, datagen.uv_threshold)
        write_image(os.path.join(output_dir, f"scene_{i:03d}.png"), render.color)
        write_image(os.path.join(output_dir, f"flow_{i:03d}.png"), flow_to_color(flow, mask))
        write_image(os.path.join(output_dir, f"match_{i:03d}.png"), match_to_gray(mask))
    logger.info(f"Wrote {count} diagnostic renders to {output_dir}")
    return count


HANDLERS = {
    "genmodel": cmd_genmodel,
    "gendata": cmd_gendata,
    "train": cmd_train,
    "fit": cmd_fit,
    "bench": cmd_bench,
    "render": cmd_render,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main function: run one subcommand and map failures to exit codes."""
    args = parse_arguments(argv)

    # Set debug logging if requested
    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = resolve_config(args)
        write_resolved_config(config, config["run"]["output_dir"])
        HANDLERS[args.command](config)
        logger.info(f"{args.command} completed successfully")
    except (DenseFaceError, FileNotFoundError) as e:
        logger.error(f"Error during {args.command}: {str(e)}")
        if args.debug:
            logger.exception("Detailed error information:")
        return e.exit_code if isinstance(e, DenseFaceError) else ConfigError.exit_code
    except Exception as e:
        logger.error(f"Error during {args.command}: {str(e)}")
        if args.debug:
            logger.exception("Detailed error information:")
        return 1

    return 0


if __name__ == "__main__":
    sys.exit(main())

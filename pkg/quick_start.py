#!/usr/bin/env python3
"""
Quick Start Script for ConvNova

Generates a synthetic motif task, fine-tunes a tiny model from scratch and
prints its metrics together with the receptive-field plan.
"""

import sys
import argparse
from pathlib import Path

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from src.convnova_model import ConvNova, ModelConfig
from src.errors import ConvNovaError
from src.genome_data import synth_motif
from src.receptive_field import plan_dilation_for_fraction, receptive_field_analytic
from src.settings import configure_logging
from src.tensor_engine import Rng
from src.trainer import TrainConfig, finetune


def run_demo(n=200, length=64, motif="TATAAT", epochs=3, hidden_dim=16, seed=0, progress=True):
    """
    Train a tiny ConvNova on a motif-presence task.

    Args:
        n: Number of synthetic examples
        length: Sequence length
        motif: Motif planted in the positive examples
        epochs: Fine-tuning epochs
        hidden_dim: Model width
        seed: Seed for data, initialization and training
        progress: Show progress bars

    Returns:
        FinetuneResult
    """
    print(f"Generating motif task: {n} sequences of length {length}, motif {motif}")
    dataset = synth_motif(n, length, motif, Rng(seed))
    print(f"Class counts: {dataset.class_counts().tolist()}")

    config = ModelConfig(hidden_dim=hidden_dim, n_gcb=2, kernel_size=5, dilation_base=2,
                         head="sequence_class", n_classes=2)
    model = ConvNova(config, seed=seed)
    info = model.get_model_info()
    print(f"Model: {info['param_count']:,} parameters, dilations {info['dilations']}, "
          f"receptive field {info['receptive_field']}")

    train = TrainConfig(learning_rate=1e-2, weight_decay=0.0, batch_size=16, epochs=epochs,
                        seed=seed, progress=progress)
    print("Fine-tuning...")
    result = finetune(model, dataset, train)

    print(f"\nBest epoch: {result.best_epoch}")
    print(result.report.to_text(), end="")

    plan = plan_dilation_for_fraction(length, 0.5, config.kernel_size, config.n_gcb, config.stage_size)
    print(f"Receptive field now: {receptive_field_analytic(config)} of {length} positions")
    print(f"Largest dilation base keeping the field within half the input: {plan.base} "
          f"(receptive field {plan.receptive_field})")
    return result


def main():
    """Main function for the demo."""
    parser = argparse.ArgumentParser(
        description="Fine-tune a tiny ConvNova on a synthetic motif task",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python quick_start.py
  python quick_start.py -n 400 -l 128 --motif GATTACA
  python quick_start.py --epochs 5 --width 32 --seed 3
        """
    )

    parser.add_argument('-n', '--examples', type=int, default=200, help='Number of examples (default: 200)')
    parser.add_argument('-l', '--length', type=int, default=64, help='Sequence length (default: 64)')
    parser.add_argument('-m', '--motif', default='TATAAT', help='Planted motif (default: TATAAT)')
    parser.add_argument('-e', '--epochs', type=int, default=3, help='Fine-tuning epochs (default: 3)')
    parser.add_argument('-w', '--width', type=int, default=16, help='Hidden width (default: 16)')
    parser.add_argument('-s', '--seed', type=int, default=0, help='Random seed (default: 0)')
    parser.add_argument('--no-progress', action='store_true', help='Disable progress bars')

    args = parser.parse_args()
    configure_logging()

    # Validate sizes
    if args.examples < 2:
        print("Error: Need at least 2 examples")
        sys.exit(1)

    if not (len(args.motif) <= args.length):
        print("Error: Motif must fit inside the sequence length")
        sys.exit(1)

    try:
        run_demo(
            n=args.examples,
            length=args.length,
            motif=args.motif,
            epochs=args.epochs,
            hidden_dim=args.width,
            seed=args.seed,
            progress=not args.no_progress,
        )
    except ConvNovaError as e:
        print(f"Error: {e.code}: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()

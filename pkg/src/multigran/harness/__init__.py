"""Training, checkpointing, inference and evaluation for the perception model."""
from .config import (SEED_ENV, STAGE2_MIX, DataConfig, ModelConfig, RunConfig, StageConfig, load_config,
                     make_stage_configs, model_config, read_config_file)
from .data import MixSampler, Stage2Data, TrainItem, mix_sampler, step_rng
from .model import PerceptionModel
from .train import (CheckpointError, RunState, Session, TrainingDiverged, load_params, lr_at, read_checkpoint,
                    run_stage, save_checkpoint, session_from_checkpoint, train)

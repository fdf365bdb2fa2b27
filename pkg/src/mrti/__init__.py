"""Multiresolution textual inversion on a toy pixel-space diffusion model."""

from .conditioning import (MultiResEmbeddingSet, Vocabulary, bucket_index, embed_sequence, embedding_at, encode,
                           null_conditioning)
from .corpus import ConceptSet, ConceptSpec, make_concept, make_corpus, render_concept
from .diffusion import (Batch, ModelConfig, ModelParams, NoiseSchedule, denoise_loss, denoiser_apply, diffuse,
                        load_checkpoint, loss_gradient, save_checkpoint)
from .errors import ConfigurationError, CorruptFile, DomainError, LookupFailure, NumericError, TrainingAborted
from .evaluation import AgreementReport, agreement_curve, energy_distance
from .inversion import InversionConfig, PretrainConfig, invert_multires, invert_single, pretrain
from .prompt import PromptError, PromptSchedule, Pseudo, Word, compile_prompt, parse, render
from .samplers import ConditioningPolicy, PolicyKind, SampleTrace, ancestral_sample, policy_embedding

__version__ = "0.1.0"

"""Spanning-tree molecular sequence modeling.

Molecular graphs are serialized as depth-first token sequences with paired
ring tokens; per-step masks over the vocabulary guarantee that every sampled
sequence decodes back into a molecule that respects the corpus-derived
valency table. A small conditional transformer learns these sequences with
any-subset property conditioning, and sampling combines classifier-free
guidance with best-of-k self-criticism.
"""

from .graph import (Atom, Fingerprint, MolGraph, canonical_key,
                    circular_fingerprint, connected_components,
                    heavy_atom_count, is_isomorphic, molecular_weight,
                    ring_count, tanimoto, weighted_degree)
from .smiles import SmilesError, parse_smiles, write_smiles
from .vocab import AtomToken, Vocab, induce_vocab, load_vocab, save_vocab
from .codec import decode, encode
from .masking import DecoderState, MaskViolation, init_state, rollout_uniform
from .model import Batch, ModelConfig, forward, init_params, loss
from .properties import (PropertyDef, PropertySpec, PropertyVector,
                         destandardize, mask_properties, sample_mask_count,
                         standardize)
from .sampling import (SampleRequest, SampleResult, guided_logits,
                       sample_best_of_k, self_predict, self_score)
from .metrics import generative_efficiency, internal_diversity, min_mae
from .training import TrainConfig, lr_at, train

__version__ = "0.1.0"

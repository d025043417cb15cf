"""Continual semantic parsing with diversified memory replay and fast/slow training."""
from .continual import (METHODS, ContinualState, TrainSchedule, compute_fisher, fast_stage, oracle_train,
                        run_stream, slow_stage, unseen_actions)
from .corpus import SynthSpec, TaskData, generate_synthetic, load_corpus
from .errors import (AmbiguousDerivation, ClspError, EmptyMemory, EmptyUtterance, GrammarError, IncompleteTree,
                     InsufficientPoints, InvalidAction, MalformedLf, MalformedRecord, NoApplicableActions,
                     NotDerivable, ParseTimeout)
from .evaluation import EvalResult, acc_avg, acc_whole, exact_match
from .grammar import Action, ActionRegistry, ActionSequence, Grammar, action_set_of, actions_to_lf, \
    applicable_actions, lf_to_actions
from .logical_forms import LogicalForm, extract_triples, lf_similarity, parse_lf, smatch_directed
from .model import Adam, Parser, ParserConfig, ParserParams
from .sampling import Memory, MemoryEntry, dlfs_select, kmedoids, memory_entropy, select_memory

__version__ = "0.1.0"

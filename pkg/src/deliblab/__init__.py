"""deliblab: a desk-scale laboratory for two-pass deliberation seq2seq models.

Everything runs on a from-scratch float64 autodiff core, and every training
scheme can be validated against an exact enumeration oracle over tiny output
spaces.
"""

from .autodiff import Tape, Tensor, backward, finite_diff_check
from .model import FirstPassParams, Vocab, generate, teacher_forced_logprob
from .second_pass import (IntermediateFeatures, SecondPassParams,
                          second_pass_logprob, two_pass_generate)
from .tasks import Corpus, TaskSpec, generate_corpus, load_corpus, save_corpus
from .training import (LossReport, SampleSet, SamplingStrategy, Scheme,
                       draw_intermediate_samples, guided_attention_loss,
                       info_gain_estimate, joint_grad_step, joint_loss_step,
                       mbr_loss, nll_teacher_forcing, separate_train_first,
                       separate_train_second, sgd_update)
from .oracle import (EnumeratedSpace, enumerate_space, exact_gradients,
                     exact_losses, exact_marginal, verify_estimator)

__version__ = "0.1.0"

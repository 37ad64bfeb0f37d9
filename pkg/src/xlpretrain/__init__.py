"""Two-phase cross-lingual pretraining on synthetic corpora, in numpy.

Submodules:
    autograd      reverse-mode tensors and the ops the model needs
    optim         Adam, gradient clipping, the warmup/decay schedule
    tokenization  vocabulary construction and greedy subword tokenization
    corpus        synthetic multilingual corpora and rebalanced sampling
    model         the masked-language-model transformer and checkpoints
    transplant    vocabulary matching and embedding transplant between models
    training      the two pretraining phases, distillation, fine-tuning
    evaluation    sentence retrieval, word alignment, transfer gap
"""

__version__ = "0.1.0"

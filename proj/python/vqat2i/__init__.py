"""VQA-augmented text-to-image pipeline bindings."""

from _vqat2i import (  # noqa: F401
    build_vocabulary,
    concatenate_qa,
    discriminator_loss,
    fid,
    generate_synthetic_dataset,
    generator_loss,
    inception_score,
    majority_answer,
    r_precision,
    run_cli,
    tokenize,
    vqa_accuracy,
    vqa_loss,
)

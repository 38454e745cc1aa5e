"""Held-in and held-out task categories with their evaluation datasets."""

HELD_IN: dict[str, tuple[str, ...]] = {
    "multiple_choice_qa": ("dream", "cosmos_qa"),
    "extractive_qa": ("adversarial_qa", "ropes"),
    "closed_book_qa": ("hotpot_qa", "wiki_qa"),
    "sentiment_analysis": ("app_reviews", "imdb"),
    "topic_classification": ("ag_news", "dbpedia"),
    "structure_to_text": ("common_gen", "wiki_bio"),
    "summarization": ("cnn_daily_mail", "xsum"),
    "paraphrase_identification": ("mrpc", "qqp"),
}

HELD_OUT: dict[str, tuple[str, ...]] = {
    "sentence_completion": ("copa", "hellaswag"),
    "natural_language_inference": ("anli", "rte"),
    "coreference_resolution": ("wsc", "winogrande"),
    "word_sense_disambiguation": ("wic",),
}

HELD_IN_CATEGORIES = tuple(HELD_IN)
HELD_OUT_CATEGORIES = tuple(HELD_OUT)

STANDARD_BASE_MODELS = ("palm2", "palm2_it")
STANDARD_SIZES = ("1B", "8B", "24B", "64B")
STANDARD_METHODS = ("average", "task_arithmetic", "dare_ties", "ties")
STANDARD_EXPERT_COUNTS = (2, 4, 6, 8)
STANDARD_SEEDS = (0, 1, 2)

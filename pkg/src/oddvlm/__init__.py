"""Zero-shot ODD perception with vision-language models."""

# Package init for src: consistency-trajectory distillation on toy mixtures

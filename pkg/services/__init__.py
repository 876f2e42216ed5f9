# Services: audio front-end, feature cache, training, conversion, evaluation

"""Self- and semi-supervised domain adaptation for streaming transducer ASR."""

//! Frozen-backbone evaluation: features, k-NN retrieval, linear probing,
//! segmentation heads and a small caption decoder.

mod caption;
mod dumps;
mod features;
mod knn;
mod probe;
mod seg;

pub use dumps::{read_caption_dump, read_seg_dump, write_caption_dump, write_seg_dump, ClassificationDump};
pub use features::{encode_images, extract_features, extract_sample_features, prepare, FeatureSet};
pub use knn::{knn_classify, knn_retrieve, KnnIndex, KnnResult, DEFAULT_K};
pub use probe::{
    cross_entropy_grad, probe_predict, softmax_f64, train_linear_head, train_linear_probe, LinearClassifier,
    ProbeConfig,
};
pub use seg::{
    evaluate_seg, extract_seg_features, seg_targets, tapped_layers, train_seg, upsample_matrix, BatchNorm,
    LinearSegHead, SegFeatures, SegHead, SegHeadConfig, SegHeadKind, SegHeadParams, SegPrediction, SegTrainConfig,
    UpernetHead,
};
pub use caption::{
    caption_predictions, caption_train, is_lora_param, lora_factor_shapes, pretrain_decoder, visual_tokens,
    CaptionDecoder, CaptionModel, CaptionPrediction, CaptionProjection, CaptionTrainConfig, DecoderConfig, LoraConfig,
    LoraTarget, Vocab, BOS, EOS, PAD, UNK,
};

//! Model zoo: conformer-lite recognizer with tap points, x-vector style
//! speaker classifier, toy waveform generator and discriminators.

mod asr;
mod checkpoint;
mod encoder;
mod params;
mod speaker;
mod synth;

pub use asr::{AsrForward, AsrModel, GrlConfig, ParamGroup, SpeakerBranch, SPEAKER_HIDDEN};
pub use checkpoint::{Architecture, Checkpoint, Manifest, ParamEntry, CHECKPOINT_VERSION};
pub use encoder::{
    stack_features, subsampled_frames, ConformerBlock, CtcHead, Encoder, EncoderConfig,
    EncoderOutput,
};
pub use params::{Bound, Conv, Init, Linear, Norm, ParamStore, LN_EPS};
pub use speaker::{SpeakerClassifier, POOL_VAR_FLOOR};
pub use synth::{
    DiscOutput, DiscView, DiscriminatorEnsemble, SubDiscriminator, SynthConfig, SynthGenerator,
};

#[cfg(test)]
mod tests;

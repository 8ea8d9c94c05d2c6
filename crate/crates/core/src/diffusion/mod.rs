//! Scene-action-conditioned latent video diffusion.

mod bundle;
mod dit;
mod pipeline;
mod sample;
mod schedule;
mod train;

pub use bundle::{make_batch, predict_noise, ConditioningBundle};
pub use dit::{position_embedding, timestep_embedding, ConditioningMode, DenoiserConfig, Dit, DitBatch};
pub use pipeline::*;
pub use sample::{sample, sample_batch, SampleConfig};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig};
pub use train::{
    assemble, eval_loss, i2v_example, noise_mse, noisy_batch, paint_unknown, training_loss, ExampleSource,
    FixedExamples, InpaintingSource, LossRegion, MaskSampler, TrainConfig, TrainExample, TrainState, STATE_KIND,
};

//! Noise schedule, forward noising, posterior steps and the guided sampler.

mod sampler;
mod schedule;

pub use sampler::{collision_gradient, SampleOutput, SampleRequest, SampleTrace, Sampler, SamplerConfig, TraceStep};
pub use schedule::{
    forward_noise, fuse_classifier_free, posterior_mean, posterior_step, NoiseSchedule, ScheduleConfig, ScheduleKind,
    POSE_LEN,
};

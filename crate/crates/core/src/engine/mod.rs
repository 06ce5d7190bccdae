// SPDX-License-Identifier: Apache-2.0

pub mod campaign;
pub mod corpus;
pub mod coverage;
pub mod mutate;
pub mod stream;

pub use campaign::{
    CampaignConfig, CampaignError, CampaignOutcome, IterationContext, IterationResult,
    IterationStatus, StopReason, replay, run_campaign, run_iteration,
};

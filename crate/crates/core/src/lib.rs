pub mod attack;
pub mod data;
pub mod defenses;
pub mod experiment;
pub mod fl;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/federated.md")]
    mod federated {}
    #[doc = include_str!("../../../book/src/flow-prior.md")]
    mod flow_prior {}
    #[doc = include_str!("../../../book/src/attack.md")]
    mod attack {}
    #[doc = include_str!("../../../book/src/defenses.md")]
    mod defenses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}

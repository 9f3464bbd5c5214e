//! Region-of-attraction estimation for multistable systems from trajectory
//! data, using an extended dynamic mode decomposition of the Koopman operator.

pub mod basis;
pub mod contour;
pub mod dynamics;
pub mod edmd;
pub mod pipeline;
pub mod roa;

// The guide's snippets run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/basis.md")]
    mod basis {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/fixed_points.md")]
    mod fixed_points {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

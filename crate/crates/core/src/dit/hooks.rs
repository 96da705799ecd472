//! Attention interception hooks.
//!
//! A hook set holds at most one callback per (site, phase). Pre-query hooks
//! may rewrite the batch of query matrices after projection; post-output
//! hooks may rewrite the batch of attention outputs after the output
//! projection, and get read access to the projected q/k/v plus an `attend`
//! closure replicating the site's attention computation for alternate
//! inputs.

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// Which attention flavour a hook binds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnSite {
    SelfAttn,
    CrossAttn,
}

/// When within the attention computation a hook fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookPhase {
    PreQuery,
    PostOutput,
}

/// Passed to every hook invocation.
#[derive(Debug, Clone, Copy)]
pub struct HookSiteInfo {
    pub site: AttnSite,
    pub layer: usize,
}

/// Read view of one attention site's batch, plus the site's attention
/// function for computing outputs against alternate keys/values.
pub struct AttentionCtx<'a> {
    /// Projected queries per batch element (after any pre-query hook).
    pub q: &'a [Tensor2D],
    /// Projected keys per batch element (full length, unmasked).
    pub k: &'a [Tensor2D],
    /// Projected values per batch element (full length, unmasked).
    pub v: &'a [Tensor2D],
    /// Active prefix length of each batch element's latent.
    pub active: &'a [usize],
    /// Valid key rows per element (active prefix for self-attention, token
    /// count for cross-attention).
    pub key_len: &'a [usize],
    pub(crate) attend: &'a dyn Fn(&Tensor2D, &Tensor2D, &Tensor2D) -> Result<Tensor2D>,
}

impl<'a> AttentionCtx<'a> {
    /// Multi-head attention plus this site's output projection.
    pub fn attend(&self, q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<Tensor2D> {
        (self.attend)(q, k, v)
    }
}

pub type PreQueryHook = Box<dyn FnMut(&HookSiteInfo, &mut [Tensor2D]) -> Result<()>>;
pub type PostOutputHook = Box<dyn FnMut(&HookSiteInfo, &AttentionCtx<'_>, &mut [Tensor2D]) -> Result<()>>;

/// Hook registry with one slot per (site, phase).
#[derive(Default)]
pub struct HookSet {
    pre_self: Option<PreQueryHook>,
    pre_cross: Option<PreQueryHook>,
    post_self: Option<PostOutputHook>,
    post_cross: Option<PostOutputHook>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.pre_self.is_none()
            && self.pre_cross.is_none()
            && self.post_self.is_none()
            && self.post_cross.is_none()
    }

    pub fn install_pre_query(&mut self, site: AttnSite, hook: PreQueryHook) -> Result<()> {
        let slot = match site {
            AttnSite::SelfAttn => &mut self.pre_self,
            AttnSite::CrossAttn => &mut self.pre_cross,
        };
        if slot.is_some() {
            return Err(Error::config(format!(
                "pre-query hook already installed at {site:?}"
            )));
        }
        *slot = Some(hook);
        Ok(())
    }

    pub fn install_post_output(&mut self, site: AttnSite, hook: PostOutputHook) -> Result<()> {
        let slot = match site {
            AttnSite::SelfAttn => &mut self.post_self,
            AttnSite::CrossAttn => &mut self.post_cross,
        };
        if slot.is_some() {
            return Err(Error::config(format!(
                "post-output hook already installed at {site:?}"
            )));
        }
        *slot = Some(hook);
        Ok(())
    }

    /// Removes the hook at (site, phase); returns whether one was present.
    pub fn uninstall(&mut self, site: AttnSite, phase: HookPhase) -> bool {
        let slot = match (site, phase) {
            (AttnSite::SelfAttn, HookPhase::PreQuery) => self.pre_self.take().is_some(),
            (AttnSite::CrossAttn, HookPhase::PreQuery) => self.pre_cross.take().is_some(),
            (AttnSite::SelfAttn, HookPhase::PostOutput) => self.post_self.take().is_some(),
            (AttnSite::CrossAttn, HookPhase::PostOutput) => self.post_cross.take().is_some(),
        };
        slot
    }

    pub(crate) fn run_pre_query(
        &mut self,
        info: &HookSiteInfo,
        qs: &mut [Tensor2D],
    ) -> Result<()> {
        let slot = match info.site {
            AttnSite::SelfAttn => &mut self.pre_self,
            AttnSite::CrossAttn => &mut self.pre_cross,
        };
        if let Some(hook) = slot {
            hook(info, qs)?;
        }
        Ok(())
    }

    pub(crate) fn run_post_output(
        &mut self,
        info: &HookSiteInfo,
        ctx: &AttentionCtx<'_>,
        outs: &mut [Tensor2D],
    ) -> Result<()> {
        let slot = match info.site {
            AttnSite::SelfAttn => &mut self.post_self,
            AttnSite::CrossAttn => &mut self.post_cross,
        };
        if let Some(hook) = slot {
            hook(info, ctx, outs)?;
        }
        Ok(())
    }
}

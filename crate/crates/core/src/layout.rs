//! Token layout: each frame holds `special_per_frame` special tokens followed
//! by `patches_per_frame` image tokens in raster order. Image tokens are
//! partitioned into groups of `group_size` consecutive tokens; groups never
//! cross a frame boundary.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    frames: usize,
    special_per_frame: usize,
    patches_per_frame: usize,
    group_size: usize,
}

impl LayoutDescriptor {
    pub fn new(frames: usize, special_per_frame: usize, patches_per_frame: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::Layout("group size must be at least 1".into()));
        }
        if !patches_per_frame.is_multiple_of(group_size) {
            return Err(Error::Layout(format!(
                "{patches_per_frame} patches per frame is not divisible by group size {group_size}"
            )));
        }
        Ok(Self { frames, special_per_frame, patches_per_frame, group_size })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn special_per_frame(&self) -> usize {
        self.special_per_frame
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patches_per_frame
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.special_per_frame + self.patches_per_frame
    }

    pub fn total_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn image_tokens(&self) -> usize {
        self.frames * self.patches_per_frame
    }

    pub fn groups_per_frame(&self) -> usize {
        self.patches_per_frame / self.group_size
    }

    pub fn group_count(&self) -> usize {
        self.frames * self.groups_per_frame()
    }

    /// Token range covered by `group_id`.
    pub fn group_index(&self, group_id: usize) -> Result<Range<usize>> {
        let groups = self.group_count();
        if group_id >= groups {
            return Err(Error::OutOfRange { index: group_id, limit: groups });
        }
        Ok(self.group_range(group_id))
    }

    /// Unchecked variant of [`group_index`](Self::group_index) for hot loops.
    #[inline]
    pub fn group_range(&self, group_id: usize) -> Range<usize> {
        let gpf = self.groups_per_frame();
        let (frame, local) = (group_id / gpf, group_id % gpf);
        let start = frame * self.tokens_per_frame() + self.special_per_frame + local * self.group_size;
        start..start + self.group_size
    }

    pub fn is_special(&self, token_id: usize) -> Result<bool> {
        let total = self.total_tokens();
        if token_id >= total {
            return Err(Error::OutOfRange { index: token_id, limit: total });
        }
        Ok(token_id % self.tokens_per_frame() < self.special_per_frame)
    }

    /// Group containing `token_id`, or `None` for special tokens.
    pub fn group_of(&self, token_id: usize) -> Result<Option<usize>> {
        if self.is_special(token_id)? {
            return Ok(None);
        }
        let tpf = self.tokens_per_frame();
        let (frame, local) = (token_id / tpf, token_id % tpf - self.special_per_frame);
        Ok(Some(frame * self.groups_per_frame() + local / self.group_size))
    }

    /// Token index of image patch `patch` (raster order) in `frame`.
    pub fn image_token(&self, frame: usize, patch: usize) -> usize {
        frame * self.tokens_per_frame() + self.special_per_frame + patch
    }
}

impl fmt::Display for LayoutDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frames={} special={} patches={} group={}",
            self.frames, self.special_per_frame, self.patches_per_frame, self.group_size
        )
    }
}

impl FromStr for LayoutDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut frames, mut special, mut patches, mut group) = (None, None, None, None);
        for field in s.split_whitespace() {
            let (key, value) =
                field.split_once('=').ok_or_else(|| Error::Format(format!("expected key=value, got {field:?}")))?;
            let value: usize = value.parse().map_err(|_| Error::Format(format!("bad value in {field:?}")))?;
            let slot = match key {
                "frames" => &mut frames,
                "special" => &mut special,
                "patches" => &mut patches,
                "group" => &mut group,
                _ => return Err(Error::Format(format!("unknown layout key {key:?}"))),
            };
            *slot = Some(value);
        }
        let need = |v: Option<usize>, k: &str| v.ok_or_else(|| Error::Format(format!("layout header is missing {k}")));
        Self::new(need(frames, "frames")?, need(special, "special")?, need(patches, "patches")?, need(group, "group")?)
    }
}

/// Spatial arrangement of a frame's image patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn patches(&self) -> usize {
        self.height * self.width
    }

    pub fn check(&self, layout: &LayoutDescriptor) -> Result<()> {
        if self.patches() != layout.patches_per_frame() {
            return Err(Error::Layout(format!(
                "{}x{} grid does not match {} patches per frame",
                self.height,
                self.width,
                layout.patches_per_frame()
            )));
        }
        Ok(())
    }
}

/// Batched tokens of shape `(batch, total_tokens, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    layout: LayoutDescriptor,
    tokens: DenseTensor,
}

impl TokenSequence {
    pub fn new(layout: LayoutDescriptor, tokens: DenseTensor) -> Result<Self> {
        if tokens.rank() != 3 || tokens.shape()[1] != layout.total_tokens() {
            return Err(Error::dim(format!("tokens {:?} do not match layout ({})", tokens.shape(), layout)));
        }
        Ok(Self { layout, tokens })
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        &self.layout
    }

    pub fn tokens(&self) -> &DenseTensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> DenseTensor {
        self.tokens
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// `(total_tokens × channels)` block for one sample.
    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.layout.total_tokens() * self.channels();
        &self.tokens.data()[b * n..(b + 1) * n]
    }

    pub fn token(&self, b: usize, t: usize) -> &[f32] {
        let c = self.channels();
        &self.sample(b)[t * c..(t + 1) * c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Walks the layout token by token, assigning group ids in encounter order.
    fn enumerate(l: &LayoutDescriptor) -> (Vec<bool>, Vec<Vec<usize>>) {
        let mut special = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut t = 0;
        for _ in 0..l.frames() {
            special.extend(std::iter::repeat_n(true, l.special_per_frame()));
            t += l.special_per_frame();
            for p in 0..l.patches_per_frame() {
                special.push(false);
                if p % l.group_size() == 0 {
                    groups.push(Vec::new());
                }
                groups.last_mut().unwrap().push(t);
                t += 1;
            }
        }
        (special, groups)
    }

    #[test]
    fn first_groups_after_specials() {
        let l = LayoutDescriptor::new(1, 2, 8, 4).unwrap();
        assert_eq!(l.group_index(0).unwrap(), 2..6);
        assert_eq!(l.group_index(1).unwrap(), 6..10);
        assert!(matches!(l.group_index(2), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn second_frame_group() {
        let l = LayoutDescriptor::new(2, 1, 4, 2).unwrap();
        let (_, groups) = enumerate(&l);
        // frame 1 starts at token 5 (its special), so its first group is [6, 8)
        assert_eq!(groups[2], vec![6, 7]);
        assert_eq!(l.group_index(2).unwrap(), 6..8);
    }

    #[test]
    fn special_tokens() {
        let l = LayoutDescriptor::new(1, 2, 8, 4).unwrap();
        assert!(l.is_special(0).unwrap());
        assert!(!l.is_special(2).unwrap());
        let l2 = LayoutDescriptor::new(2, 1, 4, 2).unwrap();
        let (special, _) = enumerate(&l2);
        assert!(special[5]);
        assert!(l2.is_special(5).unwrap());
        assert!(l2.is_special(10).is_err());
    }

    #[test]
    fn groups_and_specials_partition_tokens() {
        for (f, s, p, n) in [(1, 0, 4, 1), (3, 2, 12, 4), (2, 5, 6, 6), (4, 1, 8, 2)] {
            let l = LayoutDescriptor::new(f, s, p, n).unwrap();
            let (special, groups) = enumerate(&l);
            let mut seen = vec![0u8; l.total_tokens()];
            let mut prev_end = 0;
            assert_eq!(groups.len(), l.group_count());
            for (g, members) in groups.iter().enumerate() {
                let r = l.group_index(g).unwrap();
                assert_eq!(&r.clone().collect::<Vec<_>>(), members);
                if g % l.groups_per_frame() != 0 {
                    assert!(r.start >= prev_end);
                }
                prev_end = r.end;
                for t in r {
                    seen[t] += 1;
                    assert_eq!(l.group_of(t).unwrap(), Some(g));
                }
            }
            for t in 0..l.total_tokens() {
                assert_eq!(l.is_special(t).unwrap(), special[t]);
                if special[t] {
                    seen[t] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn rejects_partial_groups() {
        assert!(matches!(LayoutDescriptor::new(1, 0, 10, 4), Err(Error::Layout(_))));
        assert!(matches!(LayoutDescriptor::new(1, 0, 10, 0), Err(Error::Layout(_))));
    }

    #[test]
    fn header_text() {
        let l = LayoutDescriptor::new(2, 1, 16, 4).unwrap();
        let s = l.to_string();
        assert_eq!(s, "frames=2 special=1 patches=16 group=4");
        assert_eq!(s.parse::<LayoutDescriptor>().unwrap(), l);
        assert!("frames=2 special=1".parse::<LayoutDescriptor>().is_err());
        assert!("frames=2 special=1 patches=6 group=4".parse::<LayoutDescriptor>().is_err());
    }
}

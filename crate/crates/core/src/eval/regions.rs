use std::collections::VecDeque;

use crate::types::Bitmap;

/// 8-connected foreground components of a mask.
///
/// Returns a per-pixel component id (`None` for background) and the size of
/// each component, ids assigned in raster order of first pixel.
pub fn connected_components(mask: &Bitmap) -> (Vec<Option<u32>>, Vec<usize>) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels: Vec<Option<u32>> = vec![None; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || labels[start].is_some() {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = Some(id);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask.bits()[q] && labels[q].is_none() {
                        labels[q] = Some(id);
                        queue.push_back(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

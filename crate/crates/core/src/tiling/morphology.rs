//! Binary masks, Otsu thresholding, square-element morphology and
//! connected-component labelling.

/// One boolean per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size mismatch");
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of set pixels inside the `w`×`h` window at `(x, y)`.
    pub fn count_in(&self, x: usize, y: usize, w: usize, h: usize) -> usize {
        (y..y + h)
            .map(|row| {
                let start = row * self.width + x;
                self.bits[start..start + w].iter().filter(|&&b| b).count()
            })
            .sum()
    }

    pub fn mirror_horizontal(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn dilate(&self, radius: usize) -> Mask {
        self.square_filter(radius, Reduce::Any)
    }

    pub fn erode(&self, radius: usize) -> Mask {
        self.square_filter(radius, Reduce::All)
    }

    /// Dilation followed by erosion.
    pub fn close(&self, radius: usize) -> Mask {
        self.dilate(radius).erode(radius)
    }

    /// Erosion followed by dilation.
    pub fn open(&self, radius: usize) -> Mask {
        self.erode(radius).dilate(radius)
    }

    // Square structuring element, applied separably. Pixels outside the image
    // are ignored rather than padded, so a region touching the border is not
    // eaten by erosion.
    fn square_filter(&self, radius: usize, reduce: Reduce) -> Mask {
        if radius == 0 || self.bits.is_empty() {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![false; w * h];
        let mut line = Vec::with_capacity(w.max(h));
        for y in 0..h {
            line.clear();
            line.extend_from_slice(&self.bits[y * w..(y + 1) * w]);
            filter_line(&line, radius, reduce, &mut tmp[y * w..(y + 1) * w]);
        }
        let mut out = vec![false; w * h];
        let mut col_out = vec![false; h];
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| tmp[y * w + x]));
            filter_line(&line, radius, reduce, &mut col_out);
            for (y, &b) in col_out.iter().enumerate() {
                out[y * w + x] = b;
            }
        }
        Mask::new(w, h, out)
    }

    /// Areas of the 8-connected components of set pixels, in raster order of
    /// each component's first pixel.
    pub fn component_areas(&self) -> Vec<usize> {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut seen = vec![false; self.bits.len()];
        let mut stack = Vec::new();
        let mut areas = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut area = 0;
            while let Some(i) = stack.pop() {
                area += 1;
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let j = (ny * w + nx) as usize;
                        if self.bits[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            areas.push(area);
        }
        areas
    }
}

#[derive(Clone, Copy)]
enum Reduce {
    Any,
    All,
}

fn filter_line(input: &[bool], radius: usize, reduce: Reduce, out: &mut [bool]) {
    let n = input.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0usize);
    for &b in input {
        prefix.push(prefix.last().unwrap() + b as usize);
    }
    for (i, o) in out.iter_mut().enumerate() {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(n);
        let set = prefix[hi] - prefix[lo];
        *o = match reduce {
            Reduce::Any => set > 0,
            Reduce::All => set == hi - lo,
        };
    }
}

const OTSU_BINS: usize = 256;

/// Otsu threshold over `values`, quantised into 256 bins spanning their range.
///
/// Foreground is `v > threshold`. Returns `None` when every value is the same
/// (no split exists).
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || hi - lo <= 0.0 {
        return None;
    }
    let span = hi - lo;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        let bin = (((v - lo) / span) * (OTSU_BINS - 1) as f64).round() as usize;
        hist[bin.min(OTSU_BINS - 1)] += 1;
    }
    let t = otsu_bin(&hist)?;
    Some(lo + (t as f64 + 0.5) / (OTSU_BINS - 1) as f64 * span)
}

/// Otsu on a histogram: the bin `t` maximising between-class variance when
/// class 0 is bins `0..=t`. Ties go to the smallest `t`.
pub fn otsu_bin(hist: &[u64]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if total == 0 || hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total_f = total as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (f64::NEG_INFINITY, 0);
    for (t, &c) in hist.iter().enumerate().take(hist.len() - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| {
            x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
        })
    }

    #[test]
    fn erosion_and_dilation_of_square() {
        let m = square(20, 20, 5, 5, 6);
        assert_eq!(m.erode(1).count(), 16);
        assert_eq!(m.dilate(1).count(), 64);
        assert_eq!(m.open(1), m);
        assert_eq!(m.close(1), m);
    }

    #[test]
    fn border_regions_survive_erosion() {
        let full = Mask::filled(7, 5, true);
        assert_eq!(full.erode(2), full);
    }

    #[test]
    fn opening_removes_specks() {
        let mut bits = square(10, 10, 2, 2, 4).bits().to_vec();
        bits[9 * 10 + 9] = true;
        let m = Mask::new(10, 10, bits);
        assert_eq!(m.open(1), square(10, 10, 2, 2, 4));
    }

    #[test]
    fn components_are_eight_connected() {
        // Two diagonal pixels touch; a third is separate.
        let m = Mask::from_fn(5, 5, |x, y| {
            (x, y) == (0, 0) || (x, y) == (1, 1) || (x, y) == (4, 4)
        });
        assert_eq!(m.component_areas(), vec![2, 1]);
    }

    #[test]
    fn otsu_splits_two_levels() {
        let mut v = vec![0.2; 50];
        v.extend(vec![0.9; 30]);
        let t = otsu_threshold(&v).unwrap();
        assert!(t > 0.2 && t < 0.9, "{t}");
        assert_eq!(otsu_threshold(&[0.4; 10]), None);
        assert_eq!(otsu_threshold(&[]), None);
    }

    #[test]
    fn otsu_bin_prefers_balanced_split() {
        let mut hist = [0u64; 256];
        hist[10] = 100;
        hist[12] = 100;
        hist[200] = 100;
        hist[202] = 100;
        let t = otsu_bin(&hist).unwrap();
        assert!((12..200).contains(&t));
    }
}

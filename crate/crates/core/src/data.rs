//! Dataset ingestion: big-endian IDX files, binary netpbm (P5/P6)
//! directories, normalization, one-hot encoding, and seeded stratified
//! splits.

use crate::error::{Error, Result};
use crate::rng;
use crate::solver::OneHotTargets;
use crate::tensor::Tensor4;
use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set. Pixels are stored as f32; loaders produce raw 8-bit
/// values (0..=255), [`normalize`] maps them to [0,1].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        images: Tensor4,
        labels: Vec<usize>,
        n_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != n_classes {
                return Err(Error::Input(format!(
                    "{} class names for {} classes",
                    names.len(),
                    n_classes
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            n_classes,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// New dataset from the given sample indices, in the given order.
    pub fn take(&self, indices: &[usize]) -> Result<Self> {
        let (_, h, w, c) = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("index {i} out of range")));
            }
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            images: Tensor4::new(data, (indices.len(), h, w, c))?,
            labels,
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
        })
    }

    /// First `n` samples in order.
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.take(&idx)
    }
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated(format!("reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label file pair (big-endian, unsigned bytes), yielding
/// channels-last images with C=1 and `n_classes = max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut imgs = BufReader::new(fs::File::open(images_path)?);
    let magic = read_u32_be(&mut imgs, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x} in {}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut imgs, "image count")? as usize;
    let h = read_u32_be(&mut imgs, "image height")? as usize;
    let w = read_u32_be(&mut imgs, "image width")? as usize;
    let mut raw = vec![0u8; n * h * w];
    imgs.read_exact(&mut raw)
        .map_err(|_| Error::Truncated(format!("{} pixel data", images_path.display())))?;

    let mut labs = BufReader::new(fs::File::open(labels_path)?);
    let magic = read_u32_be(&mut labs, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x} in {}",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(&mut labs, "label count")? as usize;
    if ln != n {
        return Err(Error::Format(format!(
            "{n} images but {ln} labels"
        )));
    }
    let mut lraw = vec![0u8; ln];
    labs.read_exact(&mut lraw)
        .map_err(|_| Error::Truncated(format!("{} label data", labels_path.display())))?;

    let images = Tensor4::new(raw.iter().map(|&b| f32::from(b)).collect(), (n, h, w, 1))?;
    let labels: Vec<usize> = lraw.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(images, labels, n_classes, None)
}

/// Write a dataset back to an IDX pair. Pixels must be integral 8-bit
/// values and the image must be single-channel.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, h, w, c) = ds.images.shape();
    if c != 1 {
        return Err(Error::Format(format!("IDX export needs C=1, got C={c}")));
    }
    let mut bytes = Vec::with_capacity(16 + n * h * w);
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.data() {
        if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!(
                "pixel {v} is not an 8-bit value; export before normalizing"
            )));
        }
        bytes.push(v as u8);
    }
    fs::File::create(images_path)?.write_all(&bytes)?;

    let mut lbytes = Vec::with_capacity(8 + n);
    lbytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        if l > 255 {
            return Err(Error::Format(format!("label {l} does not fit in a byte")));
        }
        lbytes.push(l as u8);
    }
    fs::File::create(labels_path)?.write_all(&lbytes)?;
    Ok(())
}

/// One parsed netpbm image: `(h, w, c)` and raw bytes in channels-last
/// order (P6 pixel data is already RGB-interleaved).
fn parse_pnm(bytes: &[u8], what: &str) -> Result<((usize, usize, usize), Vec<u8>)> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::Format(format!(
                "{what}: only binary P5/P6 netpbm is supported"
            )))
        }
    };
    // Header: three whitespace-delimited integers (width, height, maxval);
    // '#' starts a comment running to end of line.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated(format!("{what}: header"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Format(format!("{what}: malformed header")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are ascii")
            .parse()
            .map_err(|_| Error::Format(format!("{what}: header value too large")))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "{what}: maxval {maxval} unsupported (must be 1..=255)"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format(format!("{what}: missing raster separator")));
    }
    pos += 1;
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Truncated(format!("{what}: raster")))?;
    Ok(((h, w, channels), raster.to_vec()))
}

/// Load a single binary PGM/PPM file as a 1-sample tensor of raw 8-bit
/// values.
pub fn load_pnm_file(path: &Path) -> Result<Tensor4> {
    let bytes = fs::read(path)?;
    let ((h, w, c), raster) = parse_pnm(&bytes, &path.display().to_string())?;
    Tensor4::new(
        raster.iter().map(|&b| f32::from(b)).collect(),
        (1, h, w, c),
    )
}

/// Load a directory tree of netpbm images: one subdirectory per class,
/// class index = lexicographic rank of the subdirectory name, files within
/// a class in lexicographic order. All images must share one shape.
pub fn load_pnm_dir(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') {
                class_dirs.push((name, entry.path()));
            }
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Input(format!(
            "{}: no class subdirectories",
            root.display()
        )));
    }

    let mut shape: Option<(usize, usize, usize)> = None;
    let mut data: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (class_idx, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file()
                && !entry.file_name().to_string_lossy().starts_with('.')
            {
                files.push(entry.path());
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Input(format!("class directory {name} is empty")));
        }
        for file in files {
            let bytes = fs::read(&file)?;
            let (s, raster) = parse_pnm(&bytes, &file.display().to_string())?;
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::Format(format!(
                        "{}: shape {s:?} differs from {prev:?}",
                        file.display()
                    )))
                }
                _ => {}
            }
            data.extend(raster.iter().map(|&b| f32::from(b)));
            labels.push(class_idx);
        }
    }
    let (h, w, c) = shape.expect("at least one image");
    let n = labels.len();
    let images = Tensor4::new(data, (n, h, w, c))?;
    let class_names: Vec<String> = class_dirs.into_iter().map(|(n, _)| n).collect();
    let n_classes = class_names.len();
    Dataset::new(images, labels, n_classes, Some(class_names))
}

/// Seeded stratified split: per class, `max(1, floor(fraction * count))`
/// samples go to train, the rest to test. Indices within each side keep
/// dataset order. Every class needs at least 2 samples.
pub fn split_stratified(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::Split(format!(
                "class {class} has {} samples; need at least 2",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        let mut rng = rng::SplitMix64::new(rng::derive(seed, class as u64));
        rng.shuffle(&mut shuffled);
        let n_train = ((train_fraction * members.len() as f64).floor() as usize)
            .max(1)
            .min(members.len() - 1);
        train_idx.extend_from_slice(&shuffled[..n_train]);
        test_idx.extend_from_slice(&shuffled[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.take(&train_idx)?, ds.take(&test_idx)?))
}

/// Scale 8-bit pixels into [0,1] by dividing by 255.
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    let data: Vec<f32> = ds.images.data().iter().map(|&v| v / 255.0).collect();
    Ok(Dataset {
        images: Tensor4::new(data, ds.images.shape())?,
        labels: ds.labels.clone(),
        n_classes: ds.n_classes,
        class_names: ds.class_names.clone(),
    })
}

/// One-hot targets for the solver.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<OneHotTargets> {
    OneHotTargets::from_labels(labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn fixture_dataset() -> Dataset {
        let data: Vec<f32> = (0..18).map(|v| (v * 13 % 256) as f32).collect();
        let images = Tensor4::new(data, (2, 3, 3, 1)).unwrap();
        Dataset::new(images, vec![1, 0], 2, None).unwrap()
    }

    #[test]
    fn idx_round_trip_is_exact() {
        let dir = tmpdir();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let ds = fixture_dataset();
        save_idx(&ds, &img, &lab).unwrap();
        let back = load_idx(&img, &lab).unwrap();
        assert_eq!(back.images.data(), ds.images.data());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.images.shape(), (2, 3, 3, 1));
    }

    #[test]
    fn idx_rejects_swapped_files() {
        let dir = tmpdir();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        save_idx(&fixture_dataset(), &img, &lab).unwrap();
        assert!(matches!(load_idx(&lab, &img), Err(Error::Format(_))));
    }

    #[test]
    fn idx_rejects_truncation_and_count_mismatch() {
        let dir = tmpdir();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        save_idx(&fixture_dataset(), &img, &lab).unwrap();

        let full = fs::read(&img).unwrap();
        fs::write(&img, &full[..full.len() - 3]).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Truncated(_))));

        fs::write(&img, &full).unwrap();
        let mut lraw = fs::read(&lab).unwrap();
        lraw[7] = 9; // claim 9 labels
        fs::write(&lab, &lraw).unwrap();
        assert!(load_idx(&img, &lab).is_err());
    }

    #[test]
    fn idx_export_rejects_normalized_pixels() {
        let dir = tmpdir();
        let ds = normalize(&fixture_dataset()).unwrap();
        let r = save_idx(&ds, &dir.path().join("i"), &dir.path().join("l"));
        assert!(matches!(r, Err(Error::Format(_))));
    }

    fn write_pgm(path: &PathBuf, w: usize, h: usize, pixels: &[u8]) {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(pixels);
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn pnm_dir_orders_classes_lexicographically() {
        let dir = tmpdir();
        for (class, pix) in [("b", 10u8), ("a", 20u8)] {
            let d = dir.path().join(class);
            fs::create_dir(&d).unwrap();
            write_pgm(&d.join("x.pgm"), 2, 2, &[pix; 4]);
        }
        let ds = load_pnm_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.class_names.as_deref().unwrap(), ["a", "b"]);
        // Class "a" (pixel 20) sorts first.
        assert_eq!(ds.images.sample(0), [20.0; 4]);
        assert_eq!(ds.images.shape(), (2, 2, 2, 1));
    }

    #[test]
    fn ppm_has_three_channels() {
        let dir = tmpdir();
        let d = dir.path().join("only");
        fs::create_dir(&d).unwrap();
        let mut bytes = b"P6\n# comment line\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        fs::write(d.join("x.ppm"), bytes).unwrap();
        let ds = load_pnm_dir(dir.path()).unwrap();
        assert_eq!(ds.images.shape(), (1, 1, 2, 3));
        assert_eq!(ds.images.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn pnm_rejects_bad_inputs() {
        let dir = tmpdir();
        let d = dir.path().join("c");
        fs::create_dir(&d).unwrap();

        fs::write(d.join("big.pgm"), b"P5\n2 2\n65535\n....").unwrap();
        assert!(matches!(load_pnm_dir(dir.path()), Err(Error::Format(_))));

        fs::write(d.join("big.pgm"), b"P5\n2 2\n255\n\x01\x02").unwrap();
        assert!(matches!(load_pnm_dir(dir.path()), Err(Error::Truncated(_))));

        fs::write(d.join("big.pgm"), b"P3\n2 2\n255\n1 2 3 4").unwrap();
        assert!(matches!(load_pnm_dir(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn pnm_rejects_mixed_shapes() {
        let dir = tmpdir();
        let d = dir.path().join("c");
        fs::create_dir(&d).unwrap();
        write_pgm(&d.join("a.pgm"), 2, 2, &[0; 4]);
        write_pgm(&d.join("b.pgm"), 3, 2, &[0; 6]);
        assert!(matches!(load_pnm_dir(dir.path()), Err(Error::Format(_))));
    }

    fn synthetic(n_classes: usize, per_class: usize) -> Dataset {
        let n = n_classes * per_class;
        let images = Tensor4::new(vec![0.0; n * 4], (n, 2, 2, 1)).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        Dataset::new(images, labels, n_classes, None).unwrap()
    }

    #[test]
    fn split_follows_floor_rule() {
        let ds = synthetic(40, 10);
        let (train, test) = split_stratified(&ds, 0.7, 42).unwrap();
        assert_eq!(train.len(), 280);
        assert_eq!(test.len(), 120);
        for class in 0..40 {
            assert_eq!(train.labels.iter().filter(|&&l| l == class).count(), 7);
            assert_eq!(test.labels.iter().filter(|&&l| l == class).count(), 3);
        }
    }

    #[test]
    fn split_two_per_class_half() {
        let ds = synthetic(3, 2);
        let (train, test) = split_stratified(&ds, 0.5, 1).unwrap();
        for class in 0..3 {
            assert_eq!(train.labels.iter().filter(|&&l| l == class).count(), 1);
            assert_eq!(test.labels.iter().filter(|&&l| l == class).count(), 1);
        }
    }

    #[test]
    fn split_deterministic_and_partitioning() {
        let n = 5 * 9;
        let images = Tensor4::new((0..n * 4).map(|v| v as f32 % 251.0).collect(), (n, 2, 2, 1))
            .unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let ds = Dataset::new(images, labels, 5, None).unwrap();

        let (tr1, te1) = split_stratified(&ds, 0.6, 7).unwrap();
        let (tr2, te2) = split_stratified(&ds, 0.6, 7).unwrap();
        assert_eq!(tr1.images.data(), tr2.images.data());
        assert_eq!(te1.labels, te2.labels);

        let (tr3, _) = split_stratified(&ds, 0.6, 8).unwrap();
        assert_ne!(tr1.images.data(), tr3.images.data());

        // Disjoint and complete: pixel multisets add up.
        let mut all: Vec<u32> = tr1
            .images
            .data()
            .iter()
            .chain(te1.images.data())
            .map(|&v| v as u32)
            .collect();
        let mut orig: Vec<u32> = ds.images.data().iter().map(|&v| v as u32).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_small_classes() {
        let images = Tensor4::new(vec![0.0; 3 * 4], (3, 2, 2, 1)).unwrap();
        let ds = Dataset::new(images, vec![0, 0, 1], 2, None).unwrap();
        assert!(matches!(
            split_stratified(&ds, 0.5, 1),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn normalize_endpoints() {
        let images = Tensor4::new(vec![0.0, 255.0, 51.0, 204.0], (1, 2, 2, 1)).unwrap();
        let ds = Dataset::new(images, vec![0], 1, None).unwrap();
        let norm = normalize(&ds).unwrap();
        assert_eq!(norm.images.data()[0], 0.0);
        assert_eq!(norm.images.data()[1], 1.0);
        assert_eq!(norm.images.data()[2], 0.2);
        assert_eq!(norm.images.data()[3], 0.8);
    }

    #[test]
    fn one_hot_columns() {
        let y = one_hot(&[2, 0], 3).unwrap();
        let yt = y.y_transposed();
        assert_eq!(yt.row(0).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(yt.row(1).to_vec(), vec![1.0, 0.0, 0.0]);
        for row in yt.rows() {
            assert_eq!(row.sum(), 1.0);
        }
        assert!(one_hot(&[3], 3).is_err());
    }
}

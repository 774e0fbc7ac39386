//! Synthetic fixture images with known blob masks.

use serde::Serialize;

pub const BLUE: [u8; 3] = [0, 0, 255];
pub const RED: [u8; 3] = [255, 0, 0];
/// Red enough for the weak-red unit (`R - B` about 0.3) but below the strong-red cut.
pub const WEAK_RED: [u8; 3] = [153, 0, 77];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Blob {
    pub name: &'static str,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    #[serde(skip)]
    pub color: [u8; 3],
}

impl Blob {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row)
            && (self.left..self.left + self.width).contains(&col)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scene {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    #[serde(skip)]
    pub pixels: Vec<[u8; 3]>,
    /// Every blob belongs to class 0.
    pub blobs: Vec<Blob>,
}

impl Scene {
    fn filled(name: &'static str, height: usize, width: usize, color: [u8; 3]) -> Self {
        Scene {
            name,
            height,
            width,
            pixels: vec![color; height * width],
            blobs: Vec::new(),
        }
    }

    fn with_blob(mut self, name: &'static str, top: usize, left: usize, height: usize, width: usize, color: [u8; 3]) -> Self {
        let blob = Blob {
            name,
            top,
            left,
            height,
            width,
            color,
        };
        for r in top..top + height {
            for c in left..left + width {
                self.pixels[r * self.width + c] = color;
            }
        }
        self.blobs.push(blob);
        self
    }

    /// 1 inside any blob, 0 elsewhere.
    pub fn label(&self) -> Vec<u8> {
        (0..self.height * self.width)
            .map(|i| {
                let (r, c) = (i / self.width, i % self.width);
                self.blobs.iter().any(|b| b.contains(r, c)) as u8
            })
            .collect()
    }

    /// Salient exactly on the blobs.
    pub fn saliency(&self) -> Vec<u8> {
        self.label().into_iter().map(|l| l * 255).collect()
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }
}

/// Red and blue squares of side 3 on a 16x16 grid.
pub fn checker16() -> Scene {
    let mut s = Scene::filled("checker16", 16, 16, BLUE);
    for r in 0..16 {
        for c in 0..16 {
            if (r / 3 + c / 3) % 2 == 0 {
                s.pixels[r * 16 + c] = RED;
            }
        }
    }
    s
}

pub fn black16() -> Scene {
    Scene::filled("black16", 16, 16, [0, 0, 0])
}

pub fn gray64() -> Scene {
    Scene::filled("gray64", 64, 64, [128, 128, 128])
}

/// Strong blob A hides weak blob B until A is erased.
pub fn two_blob() -> Scene {
    Scene::filled("two_blob", 128, 128, BLUE)
        .with_blob("a", 24, 24, 32, 32, RED)
        .with_blob("b", 80, 76, 24, 32, WEAK_RED)
}

/// Blob B is small enough that its second-iteration activation stays under 1% of the image.
pub fn one_percent() -> Scene {
    Scene::filled("one_percent", 128, 128, BLUE)
        .with_blob("a", 24, 24, 32, 32, RED)
        .with_blob("b", 88, 88, 8, 8, WEAK_RED)
}

/// As [`one_percent`] with B one cell taller, pushing it just over 1%.
pub fn one_percent_plus() -> Scene {
    Scene::filled("one_percent_plus", 128, 128, BLUE)
        .with_blob("a", 24, 24, 32, 32, RED)
        .with_blob("b", 88, 88, 12, 8, WEAK_RED)
}

pub fn blob_02() -> Scene {
    Scene::filled("blob_02", 128, 128, BLUE)
        .with_blob("a", 72, 64, 32, 32, RED)
        .with_blob("b", 16, 20, 28, 24, WEAK_RED)
}

pub fn blob_03() -> Scene {
    Scene::filled("blob_03", 96, 160, BLUE)
        .with_blob("a", 28, 100, 32, 40, RED)
        .with_blob("b", 36, 16, 24, 36, WEAK_RED)
}

pub fn blob_04() -> Scene {
    Scene::filled("blob_04", 128, 128, BLUE)
        .with_blob("a", 16, 80, 24, 32, RED)
        .with_blob("b", 84, 24, 28, 28, WEAK_RED)
}

/// Images run through the forward-pass goldens.
pub fn probes() -> Vec<Scene> {
    vec![
        checker16(),
        black16(),
        gray64(),
        two_blob(),
        one_percent(),
        one_percent_plus(),
        blob_02(),
        blob_03(),
        blob_04(),
    ]
}

/// The single-class two-blob suite used for the end-to-end comparison.
pub fn suite() -> Vec<Scene> {
    vec![two_blob(), blob_02(), blob_03(), blob_04()]
}

//! COCO-style amodal annotation files.
//!
//! ```text
//! {"images": [{"id", "width", "height", "file"}],
//!  "annotations": [{"id", "image_id", "category_id", "bbox": [x, y, w, h],
//!                   "amodal_rle": {"size": [h, w], "counts": [...]},
//!                   "visible_rle": {...}}],
//!  "categories": [{"id", "name"}]}
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rle_decode, rle_encode, Bitmap, RleMask};
use crate::error::{Error, Result};
use crate::roi::BoundingBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// One object with its four full-resolution masks.
#[derive(Debug, Clone, PartialEq)]
pub struct AmodalInstance {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BoundingBox,
    pub amodal: Bitmap,
    pub visible: Bitmap,
    pub occluder: Bitmap,
    pub invisible: Bitmap,
}

impl AmodalInstance {
    /// Checks `visible ⊆ amodal` and derives the invisible mask.
    pub fn new(
        id: u64,
        image_id: u64,
        category_id: u64,
        bbox: BoundingBox,
        amodal: Bitmap,
        visible: Bitmap,
        occluder: Bitmap,
    ) -> Result<Self> {
        let data_err = |message: String| Error::Data { instance_id: id, message };
        let outside = visible
            .count_outside(&amodal)
            .map_err(|e| data_err(format!("visible/amodal: {e}")))?;
        if outside > 0 {
            return Err(data_err(format!("{outside} visible pixels lie outside the amodal mask")));
        }
        if (occluder.height, occluder.width) != (amodal.height, amodal.width) {
            return Err(data_err("occluder mask size differs from amodal mask".into()));
        }
        let invisible = amodal.and_not(&visible)?;
        Ok(Self {
            id,
            image_id,
            category_id,
            bbox,
            amodal,
            visible,
            occluder,
            invisible,
        })
    }

    pub fn height(&self) -> usize {
        self.amodal.height
    }

    pub fn width(&self) -> usize {
        self.amodal.width
    }
}

/// Pixel index range `[x0, x1) × [y0, y1)` of pixels whose centers fall inside
/// the box, clamped to a `width × height` image.
pub fn box_pixel_range(bbox: &BoundingBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let lo = |v: f64, n: usize| ((v - 0.5).ceil().max(0.0) as usize).min(n);
    (lo(bbox.x0, width), lo(bbox.y0, height), lo(bbox.x1, width), lo(bbox.y1, height))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub info: ImageRecord,
    pub instances: Vec<AmodalInstance>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn instance_count(&self) -> usize {
        self.images.iter().map(|e| e.instances.len()).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &AmodalInstance> {
        self.images.iter().flat_map(|e| e.instances.iter())
    }

    pub fn category_ids(&self) -> Vec<u64> {
        self.categories.iter().map(|c| c.id).collect()
    }

    /// Dataset restricted to the images at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            categories: self.categories.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = AnnotationFile {
            images: self.images.iter().map(|e| e.info.clone()).collect(),
            annotations: self
                .instances()
                .map(|inst| RawAnnotation {
                    id: inst.id,
                    image_id: inst.image_id,
                    category_id: inst.category_id,
                    bbox: inst.bbox.to_xywh(),
                    amodal_rle: rle_encode(&inst.amodal),
                    visible_rle: rle_encode(&inst.visible),
                })
                .collect(),
            categories: self.categories.clone(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Parse an annotation document. `origin` names the source in errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Dataset> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("{origin}:{}:{}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        build_dataset(file, origin)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    images: Vec<ImageRecord>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    amodal_rle: RleMask,
    visible_rle: RleMask,
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_json(&text, &path.display().to_string())
}

fn build_dataset(file: AnnotationFile, origin: &str) -> Result<Dataset> {
    let schema = |idx: usize, message: String| Error::Parse {
        location: format!("{origin}: annotations[{idx}]"),
        message,
    };
    let mut entries: BTreeMap<u64, (usize, ImageEntry)> = BTreeMap::new();
    for (order, info) in file.images.into_iter().enumerate() {
        let id = info.id;
        let entry = ImageEntry {
            info,
            instances: Vec::new(),
        };
        if entries.insert(id, (order, entry)).is_some() {
            return Err(Error::Parse {
                location: format!("{origin}: images[{order}]"),
                message: format!("duplicate image id {id}"),
            });
        }
    }
    let category_ids: Vec<u64> = file.categories.iter().map(|c| c.id).collect();

    // masks per image first; occluders need every instance of the image
    let mut raw_by_image: BTreeMap<u64, Vec<(u64, u64, BoundingBox, Bitmap, Bitmap)>> = BTreeMap::new();
    for (idx, a) in file.annotations.into_iter().enumerate() {
        let Some((_, entry)) = entries.get(&a.image_id) else {
            return Err(schema(idx, format!("unknown image_id {}", a.image_id)));
        };
        if !category_ids.contains(&a.category_id) {
            return Err(schema(idx, format!("unknown category_id {}", a.category_id)));
        }
        let dims = [entry.info.height, entry.info.width];
        for (name, r) in [("amodal_rle", &a.amodal_rle), ("visible_rle", &a.visible_rle)] {
            if r.size != dims {
                return Err(schema(idx, format!("{name} size {:?} differs from image size {dims:?}", r.size)));
            }
        }
        let bbox = BoundingBox::from_xywh(a.bbox).map_err(|e| schema(idx, e.to_string()))?;
        let amodal = rle_decode(&a.amodal_rle).map_err(|e| schema(idx, e.to_string()))?;
        let visible = rle_decode(&a.visible_rle).map_err(|e| schema(idx, e.to_string()))?;
        raw_by_image
            .entry(a.image_id)
            .or_default()
            .push((a.id, a.category_id, bbox, amodal, visible));
    }

    for (image_id, raws) in raw_by_image {
        let entry = &mut entries.get_mut(&image_id).expect("checked above").1;
        for (i, (id, cat, bbox, amodal, visible)) in raws.iter().enumerate() {
            let occluder = derive_occluder(i, &raws, bbox)?;
            let inst = AmodalInstance::new(*id, image_id, *cat, *bbox, amodal.clone(), visible.clone(), occluder)?;
            entry.instances.push(inst);
        }
    }

    let mut images: Vec<(usize, ImageEntry)> = entries.into_values().collect();
    images.sort_by_key(|(order, _)| *order);
    Ok(Dataset {
        images: images.into_iter().map(|(_, e)| e).collect(),
        categories: file.categories,
    })
}

/// Files carry no depth order, so an instance counts as an occluder of `i`
/// when its visible mask covers part of `i`'s hidden region.
fn derive_occluder(i: usize, raws: &[(u64, u64, BoundingBox, Bitmap, Bitmap)], bbox: &BoundingBox) -> Result<Bitmap> {
    let (_, _, _, amodal_i, visible_i) = &raws[i];
    let hidden = amodal_i.and_not(visible_i)?;
    let mut occ = Bitmap::zeros(amodal_i.height, amodal_i.width);
    if hidden.is_empty() {
        return Ok(occ);
    }
    for (j, (_, _, _, amodal_j, visible_j)) in raws.iter().enumerate() {
        if j != i && !visible_j.and(&hidden)?.is_empty() {
            occ = occ.or(amodal_j)?;
        }
    }
    let (x0, y0, x1, y1) = box_pixel_range(bbox, occ.width, occ.height);
    Ok(occ.clip_to(x0, y0, x1, y1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Bitmap {
        Bitmap::from_fn(h, w, |y, x| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let d = Dataset::from_json(r#"{"images":[],"annotations":[],"categories":[]}"#, "t").unwrap();
        assert_eq!(d.instance_count(), 0);
    }

    #[test]
    fn unoccluded_instance_has_empty_invisible() {
        let m = rect(6, 6, 1, 1, 4, 4);
        let inst = AmodalInstance::new(
            1,
            1,
            1,
            BoundingBox::new(1.0, 1.0, 4.0, 4.0).unwrap(),
            m.clone(),
            m.clone(),
            Bitmap::zeros(6, 6),
        )
        .unwrap();
        assert!(inst.invisible.is_empty());
    }

    #[test]
    fn visible_outside_amodal_names_instance() {
        let err = AmodalInstance::new(
            42,
            1,
            1,
            BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
            rect(4, 4, 0, 0, 2, 2),
            rect(4, 4, 0, 0, 3, 3),
            Bitmap::zeros(4, 4),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data { instance_id: 42, .. }));
    }

    #[test]
    fn schema_errors_carry_a_location() {
        let err = Dataset::from_json("{\"images\": [}", "file.json").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert!(location.starts_with("file.json:1:")),
            other => panic!("unexpected {other:?}"),
        }
        let bad_image = r#"{"images":[],"annotations":[{"id":1,"image_id":9,"category_id":1,"bbox":[0,0,1,1],
            "amodal_rle":{"size":[1,1],"counts":[0,1]},"visible_rle":{"size":[1,1],"counts":[0,1]}}],
            "categories":[{"id":1,"name":"a"}]}"#;
        assert!(matches!(Dataset::from_json(bad_image, "f"), Err(Error::Parse { .. })));
    }

    #[test]
    fn json_roundtrip_preserves_masks() {
        let (h, w) = (8, 10);
        let far = rect(h, w, 1, 1, 6, 6);
        let near = rect(h, w, 4, 3, 9, 8);
        let far_vis = far.and_not(&near).unwrap();
        let mut d = Dataset {
            images: vec![ImageEntry {
                info: ImageRecord {
                    id: 3,
                    width: w,
                    height: h,
                    file: "a.ppm".into(),
                },
                instances: Vec::new(),
            }],
            categories: vec![Category { id: 1, name: "rect".into() }],
        };
        let b_far = BoundingBox::new(1.0, 1.0, 6.0, 6.0).unwrap();
        let b_near = BoundingBox::new(4.0, 3.0, 9.0, 8.0).unwrap();
        let occ = near.clip_to(1, 1, 6, 6);
        d.images[0].instances.push(AmodalInstance::new(1, 3, 1, b_far, far.clone(), far_vis, occ).unwrap());
        d.images[0]
            .instances
            .push(AmodalInstance::new(2, 3, 1, b_near, near.clone(), near.clone(), Bitmap::zeros(h, w)).unwrap());
        let back = Dataset::from_json(&d.to_json().unwrap(), "mem").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn box_pixel_range_uses_centers() {
        let b = BoundingBox::new(2.0, 1.4, 5.0, 3.6).unwrap();
        assert_eq!(box_pixel_range(&b, 10, 10), (2, 1, 5, 4));
        assert_eq!(box_pixel_range(&b, 4, 2), (2, 1, 4, 2));
    }
}

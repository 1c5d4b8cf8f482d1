//! Semantic class table, label seeding and the dynamic/static/ground/sky
//! partition derived from per-Gaussian logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::argmax;
use crate::types::Scene;

/// Logit given to the observed class when seeding from labeled points.
pub const SEED_LOGIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub is_dynamic: bool,
    #[serde(default)]
    pub is_ground: bool,
    #[serde(default)]
    pub is_sky: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassEntry>,
}

impl ClassTable {
    pub const ROAD: usize = 0;
    pub const BUILDING: usize = 1;
    pub const VEGETATION: usize = 2;
    pub const VEHICLE: usize = 3;
    pub const PEDESTRIAN: usize = 4;
    pub const SKY: usize = 5;

    /// road, building, vegetation, vehicle, pedestrian, sky.
    pub fn default_urban() -> Self {
        let entry = |id, name: &str, d, g, s| ClassEntry {
            id,
            name: name.to_string(),
            is_dynamic: d,
            is_ground: g,
            is_sky: s,
        };
        Self {
            classes: vec![
                entry(0, "road", false, true, false),
                entry(1, "building", false, false, false),
                entry(2, "vegetation", false, false, false),
                entry(3, "vehicle", true, false, false),
                entry(4, "pedestrian", true, false, false),
                entry(5, "sky", false, false, true),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn sky_class(&self) -> Option<usize> {
        self.classes.iter().position(|c| c.is_sky)
    }

    pub fn is_dynamic(&self, class: usize) -> bool {
        self.classes[class].is_dynamic
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.classes.is_empty() {
            v.push("class table is empty".to_string());
        }
        if self.classes.len() > u8::MAX as usize {
            v.push("class table has more than 255 classes".to_string());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                v.push(format!("class table: entry {i} has id {} (ids must be dense)", c.id));
            }
            if c.is_sky && (c.is_dynamic || c.is_ground) {
                v.push(format!("class table: sky class {} is also dynamic or ground", c.name));
            }
        }
        v
    }
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::default_urban()
    }
}

/// Logits for a point with a known class (`Some`) or an unlabeled random
/// point (`None`, all zeros).
pub fn seed_logits(class: Option<usize>, num_classes: usize) -> Result<Vec<f64>> {
    let mut logits = vec![0.0; num_classes];
    if let Some(c) = class {
        if c >= num_classes {
            return Err(Error::config(format!(
                "class id {c} is not in the class table ({num_classes} classes)"
            )));
        }
        logits[c] = SEED_LOGIT;
    }
    Ok(logits)
}

/// Seeds logits for a labeled point cloud.
pub fn seed_labels(labels: &[Option<usize>], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    labels.iter().map(|&c| seed_logits(c, num_classes)).collect()
}

/// The four index sets of a partition, each in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub dyn_idx: Vec<usize>,
    pub static_idx: Vec<usize>,
    pub ground_idx: Vec<usize>,
    pub sky_idx: Vec<usize>,
}

/// Hard class of every Gaussian: argmax of its logits, ties to the lowest id.
pub fn hard_classes(scene: &Scene) -> Vec<usize> {
    scene.gaussians.iter().map(|g| argmax(&g.sem_logits)).collect()
}

pub fn partition(scene: &Scene, table: &ClassTable) -> Partition {
    let mut p = Partition::default();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let c = &table.classes[argmax(&g.sem_logits)];
        if c.is_dynamic {
            p.dyn_idx.push(i);
        } else {
            p.static_idx.push(i);
        }
        if c.is_ground {
            p.ground_idx.push(i);
        }
        if c.is_sky {
            p.sky_idx.push(i);
        }
    }
    p
}

/// Recomputes the partition from the current logits and installs it.
/// Newly dynamic Gaussians without an embedding receive a zero one; returns
/// the indices that were promoted.
pub fn refresh_partitions(scene: &mut Scene) -> Vec<usize> {
    let p = partition(scene, &scene.class_table);
    let mut promoted = Vec::new();
    let was_dynamic = scene.dynamic_mask();
    for &i in &p.dyn_idx {
        if !was_dynamic[i] {
            promoted.push(i);
        }
        let g = &mut scene.gaussians[i];
        if g.time_embed.is_none() {
            g.time_embed = Some(vec![0.0; scene.time_embed_dim]);
        }
    }
    scene.dyn_idx = p.dyn_idx;
    scene.static_idx = p.static_idx;
    scene.ground_idx = p.ground_idx;
    scene.sky_idx = p.sky_idx;
    promoted
}

/// When partitions are recomputed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RefreshSchedule {
    Never,
    /// Every `every` iterations.
    Periodic { every: usize },
    /// Every `every` iterations until `until`, then frozen.
    FreezeAfter { every: usize, until: usize },
}

impl Default for RefreshSchedule {
    fn default() -> Self {
        RefreshSchedule::Periodic { every: 500 }
    }
}

impl RefreshSchedule {
    /// True if a refresh is due after completing `iter` iterations.
    pub fn due(&self, iter: usize) -> bool {
        match *self {
            RefreshSchedule::Never => false,
            RefreshSchedule::Periodic { every } => every > 0 && iter > 0 && iter % every == 0,
            RefreshSchedule::FreezeAfter { every, until } => {
                every > 0 && iter > 0 && iter <= until && iter % every == 0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::IDENTITY_QUAT;
    use crate::types::{validate_scene, Gaussian, SkyTexture};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene_with_classes(classes: &[usize]) -> Scene {
        let table = ClassTable::default_urban();
        let gaussians = classes
            .iter()
            .map(|&c| Gaussian {
                mu: Vector3::zeros(),
                rot: IDENTITY_QUAT,
                scale: Vector3::repeat(0.1),
                opacity: 0.5,
                color: vec![0.5; 3],
                sem_logits: seed_logits(Some(c), table.len()).unwrap(),
                time_embed: None,
            })
            .collect();
        let mut s = Scene {
            gaussians,
            dyn_idx: vec![],
            static_idx: (0..classes.len()).collect(),
            ground_idx: vec![],
            sky_idx: vec![],
            sky: SkyTexture::constant(4, 2, [0.5; 3]),
            class_table: table,
            sh_degree: 0,
            time_embed_dim: 8,
        };
        refresh_partitions(&mut s);
        s
    }

    #[test]
    fn seeding_rules() {
        assert_eq!(seed_logits(Some(0), 6).unwrap(), vec![4.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let random = seed_logits(None, 6).unwrap();
        assert_eq!(random, vec![0.0; 6]);
        assert_eq!(argmax(&random), 0);
        assert!(seed_logits(Some(6), 6).is_err());
    }

    #[test]
    fn seeded_labels_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<Option<usize>> = (0..100).map(|_| Some(rng.gen_range(0..6))).collect();
        let logits = seed_labels(&labels, 6).unwrap();
        for (l, z) in labels.iter().zip(&logits) {
            assert_eq!(Some(argmax(z)), *l);
        }
    }

    #[test]
    fn all_vehicles_are_dynamic() {
        let s = scene_with_classes(&[3; 7]);
        assert_eq!(s.dyn_idx.len(), 7);
        assert!(s.static_idx.is_empty());
    }

    #[test]
    fn mixed_road_and_vehicle() {
        let mut classes = vec![0; 10];
        classes.extend([3; 5]);
        let s = scene_with_classes(&classes);
        assert_eq!(s.ground_idx.len(), 10);
        assert_eq!(s.dyn_idx.len(), 5);
        assert!(s.ground_idx.iter().all(|i| !s.dyn_idx.contains(i)));
        assert!(validate_scene(&s).is_empty());
    }

    #[test]
    fn tie_between_road_and_vehicle_goes_to_road() {
        let mut s = scene_with_classes(&[0]);
        s.gaussians[0].sem_logits = vec![2.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        let p = partition(&s, &s.class_table);
        assert_eq!(p.static_idx, vec![0]);
        assert_eq!(p.ground_idx, vec![0]);
    }

    #[test]
    fn refresh_is_idempotent_and_promotes_with_zero_embedding() {
        let mut s = scene_with_classes(&[0, 1, 3]);
        let before = s.clone();
        assert!(refresh_partitions(&mut s).is_empty());
        assert_eq!(s, before);

        s.gaussians[0].sem_logits[3] = 5.0;
        let promoted = refresh_partitions(&mut s);
        assert_eq!(promoted, vec![0]);
        assert_eq!(s.dyn_idx, vec![0, 2]);
        assert_eq!(s.gaussians[0].time_embed, Some(vec![0.0; 8]));
        assert!(validate_scene(&s).is_empty());
    }

    #[test]
    fn demoted_gaussians_keep_their_embedding() {
        let mut s = scene_with_classes(&[3]);
        s.gaussians[0].time_embed = Some(vec![0.5; 8]);
        s.gaussians[0].sem_logits = seed_logits(Some(1), 6).unwrap();
        refresh_partitions(&mut s);
        assert!(s.dyn_idx.is_empty());
        assert_eq!(s.gaussians[0].time_embed, Some(vec![0.5; 8]));
    }

    #[test]
    fn randomized_partitions_always_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = scene_with_classes(&[0, 1, 2, 3, 4, 5, 0, 3]);
        for _ in 0..1000 {
            for g in &mut s.gaussians {
                for l in &mut g.sem_logits {
                    *l += rng.gen_range(-1.0..1.0);
                }
            }
            refresh_partitions(&mut s);
            assert!(validate_scene(&s).is_empty());
        }
    }

    #[test]
    fn schedules() {
        let p = RefreshSchedule::Periodic { every: 500 };
        assert!(!p.due(0) && p.due(500) && !p.due(501) && p.due(1000));
        let f = RefreshSchedule::FreezeAfter { every: 500, until: 1000 };
        assert!(f.due(1000) && !f.due(1500));
        assert!(!RefreshSchedule::Never.due(500));
    }

    proptest::proptest! {
        #[test]
        fn positive_scaling_preserves_partition(
            logits in proptest::collection::vec(-5.0f64..5.0, 6),
            k in 0.01f64..100.0,
        ) {
            let mut s = scene_with_classes(&[0]);
            s.gaussians[0].sem_logits = logits.clone();
            let a = partition(&s, &s.class_table);
            s.gaussians[0].sem_logits = logits.iter().map(|l| l * k).collect();
            let b = partition(&s, &s.class_table);
            proptest::prop_assert_eq!(a, b);
        }
    }
}

//! Occlusion statistics over a dataset split.

use serde::Serialize;

use crate::dataset::Dataset;

/// Image and occlusion statistics for one split. Rates are percentages kept
/// as exact ratios; rounding happens only in the rendered table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub num_imgs: usize,
    pub num_imgs_with_occl: usize,
    pub img_occl_rate: f64,
    pub num_objs: usize,
    pub num_objs_occl: usize,
    pub obj_occl_rate: f64,
    pub avg_or_per_region_all: f64,
    pub avg_or_per_region_occl: f64,
}

/// An object is occluded iff its invisible mask is present and nonempty; an
/// image contains occlusion iff at least one of its objects is occluded.
pub fn compute_stats(ds: &Dataset) -> SplitStats {
    let num_imgs = ds.images.len();
    let num_imgs_with_occl = ds
        .images
        .iter()
        .filter(|img| img.annotations.iter().any(|a| a.is_occluded()))
        .count();
    let mut num_objs = 0usize;
    let mut num_objs_occl = 0usize;
    let mut rate_sum_all = 0.0f64;
    let mut rate_sum_occl = 0.0f64;
    for ann in ds.annotations() {
        num_objs += 1;
        let rate = ann.occlusion_rate();
        rate_sum_all += rate;
        if ann.is_occluded() {
            num_objs_occl += 1;
            rate_sum_occl += rate;
        }
    }
    let pct = |num: f64, den: f64| if den == 0.0 { 0.0 } else { 100.0 * num / den };
    SplitStats {
        num_imgs,
        num_imgs_with_occl,
        img_occl_rate: pct(num_imgs_with_occl as f64, num_imgs as f64),
        num_objs,
        num_objs_occl,
        obj_occl_rate: pct(num_objs_occl as f64, num_objs as f64),
        avg_or_per_region_all: pct(rate_sum_all, num_objs as f64),
        avg_or_per_region_occl: pct(rate_sum_occl, num_objs_occl as f64),
    }
}

/// Fixed-width table with one row per statistic, percentages rounded to
/// integers for display.
pub fn render_table(split_name: &str, stats: &SplitStats) -> String {
    let rows: [(&str, String); 8] = [
        ("num imgs", stats.num_imgs.to_string()),
        ("num imgs w/ occl", stats.num_imgs_with_occl.to_string()),
        ("img OR [%]", format!("{:.0}", stats.img_occl_rate)),
        ("num objs", stats.num_objs.to_string()),
        ("num objs occl", stats.num_objs_occl.to_string()),
        ("obj OR [%]", format!("{:.0}", stats.obj_occl_rate)),
        (
            "avg OR / reg (all) [%]",
            format!("{:.0}", stats.avg_or_per_region_all),
        ),
        (
            "avg OR / reg (occl) [%]",
            format!("{:.0}", stats.avg_or_per_region_occl),
        ),
    ];
    let mut out = format!("{:<24} {:>10}\n", "split name", split_name);
    for (label, value) in rows {
        out.push_str(&format!("{:<24} {:>10}\n", label, value));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Category, Dataset, ImageRecord, InstanceAnnotation};
    use crate::mask::BinaryMask;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strip_ann(
        id: u64,
        image_id: u64,
        total: u32,
        hidden: u32, // leading pixels marked invisible
    ) -> InstanceAnnotation {
        let h = 10u32;
        let w = 10u32;
        let mut amodal = vec![false; (h * w) as usize];
        for i in 0..total {
            amodal[i as usize] = true;
        }
        let mut visible = amodal.clone();
        for v in visible.iter_mut().take(hidden as usize) {
            *v = false;
        }
        let amodal = BinaryMask::from_dense(h, w, &amodal);
        let visible = BinaryMask::from_dense(h, w, &visible);
        let invisible = if hidden > 0 {
            Some(amodal.difference(&visible).unwrap())
        } else {
            None
        };
        InstanceAnnotation {
            id,
            image_id,
            category_id: 1,
            amodal,
            visible,
            invisible,
            depth_order: 0,
            is_crowd: false,
            canvas_origin: (0, 0),
        }
    }

    fn dataset(images: Vec<ImageRecord>) -> Dataset {
        Dataset {
            split_name: "s".into(),
            categories: vec![Category {
                id: 1,
                name: "c".into(),
                is_stuff: false,
            }],
            images,
        }
    }

    fn image(id: u64, annotations: Vec<InstanceAnnotation>) -> ImageRecord {
        ImageRecord {
            id,
            width: 10,
            height: 10,
            file_name: String::new(),
            padding: None,
            annotations,
        }
    }

    #[test]
    fn empty_dataset_all_zero() {
        let s = compute_stats(&dataset(vec![]));
        assert_eq!(s.num_imgs, 0);
        assert_eq!(s.img_occl_rate, 0.0);
        assert_eq!(s.avg_or_per_region_occl, 0.0);
    }

    #[test]
    fn hand_built_three_image_fixture() {
        // 3 images / 5 objects, 2 occluded with rates 0.2 and 0.4, both in
        // one image: img OR 100/3, obj OR 40, avg-all 12, avg-occl 30
        let ds = dataset(vec![
            image(
                1,
                vec![strip_ann(1, 1, 50, 10), strip_ann(2, 1, 50, 20)],
            ),
            image(2, vec![strip_ann(3, 2, 40, 0), strip_ann(4, 2, 60, 0)]),
            image(3, vec![strip_ann(5, 3, 30, 0)]),
        ]);
        let s = compute_stats(&ds);
        assert_eq!(s.num_imgs, 3);
        assert_eq!(s.num_imgs_with_occl, 1);
        assert!((s.img_occl_rate - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.num_objs, 5);
        assert_eq!(s.num_objs_occl, 2);
        assert!((s.obj_occl_rate - 40.0).abs() < 1e-12);
        assert!((s.avg_or_per_region_all - 12.0).abs() < 1e-12);
        assert!((s.avg_or_per_region_occl - 30.0).abs() < 1e-12);

        let table = render_table("fixture", &s);
        assert!(table.contains("img OR [%]"));
        assert!(table.contains("avg OR / reg (occl) [%]"));
        assert!(table.lines().any(|l| l.starts_with("img OR") && l.ends_with("33")));
    }

    #[test]
    fn fully_visible_dataset() {
        let ds = dataset(vec![image(1, vec![strip_ann(1, 1, 30, 0)])]);
        let s = compute_stats(&ds);
        assert_eq!(s.num_imgs_with_occl, 0);
        assert_eq!(s.img_occl_rate, 0.0);
        assert_eq!(s.avg_or_per_region_all, 0.0);
        assert_eq!(s.avg_or_per_region_occl, 0.0);
    }

    #[test]
    fn occluded_average_dominates_overall_average() {
        let ds = dataset(vec![image(
            1,
            vec![strip_ann(1, 1, 50, 10), strip_ann(2, 1, 50, 0)],
        )]);
        let s = compute_stats(&ds);
        assert!(s.avg_or_per_region_occl >= s.avg_or_per_region_all);
    }

    #[test]
    fn disjoint_union_combines_as_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut next_img = 1u64;
            let mut next_ann = 1u64;
            let mut make_split = |n_imgs: usize, rng: &mut ChaCha8Rng| {
                let mut images = Vec::new();
                for _ in 0..n_imgs {
                    let img_id = next_img;
                    next_img += 1;
                    let n_objs = rng.random_range(1..4);
                    let mut anns = Vec::new();
                    for _ in 0..n_objs {
                        let total = rng.random_range(10..60);
                        let hidden = rng.random_range(0..total / 2);
                        anns.push(strip_ann(next_ann, img_id, total, hidden));
                        next_ann += 1;
                    }
                    images.push(image(img_id, anns));
                }
                dataset(images)
            };
            let na = rng.random_range(1..4);
            let a = make_split(na, &mut rng);
            let nb = rng.random_range(1..4);
            let b = make_split(nb, &mut rng);
            let sa = compute_stats(&a);
            let sb = compute_stats(&b);
            let mut both = a.clone();
            both.images.extend(b.images.clone());
            let s = compute_stats(&both);

            assert_eq!(s.num_imgs, sa.num_imgs + sb.num_imgs);
            assert_eq!(s.num_objs, sa.num_objs + sb.num_objs);
            assert_eq!(s.num_objs_occl, sa.num_objs_occl + sb.num_objs_occl);
            let weighted = |xa: f64, wa: usize, xb: f64, wb: usize| {
                if wa + wb == 0 {
                    0.0
                } else {
                    (xa * wa as f64 + xb * wb as f64) / (wa + wb) as f64
                }
            };
            assert!(
                (s.img_occl_rate
                    - weighted(sa.img_occl_rate, sa.num_imgs, sb.img_occl_rate, sb.num_imgs))
                .abs()
                    < 1e-9
            );
            assert!(
                (s.avg_or_per_region_all
                    - weighted(
                        sa.avg_or_per_region_all,
                        sa.num_objs,
                        sb.avg_or_per_region_all,
                        sb.num_objs
                    ))
                .abs()
                    < 1e-9
            );
            assert!(
                (s.avg_or_per_region_occl
                    - weighted(
                        sa.avg_or_per_region_occl,
                        sa.num_objs_occl,
                        sb.avg_or_per_region_occl,
                        sb.num_objs_occl
                    ))
                .abs()
                    < 1e-9
            );
        }
    }
}

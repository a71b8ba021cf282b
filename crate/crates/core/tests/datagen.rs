use std::fs;

use ndarray::ArrayView1;
use sidesep::datagen::{build_dataset, synth_track, verify_dataset, DatagenError, SynthSpec};
use sidesep::dsp::{self, StftConfig};
use sidesep::losses::cosine_distance;
use sidesep::sidefeat::{extract_pseudo_vggish, SourceTag};
use sidesep::trainer;

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_train: 2,
        n_valid: 1,
        n_test: 1,
        duration: 7.0,
        ..SynthSpec::default()
    }
}

#[test]
fn tree_loads_through_the_trainer() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let manifest = build_dataset(&small_spec(), &root, false).unwrap();
    assert_eq!(manifest.tracks.len(), 4);
    for (split, n) in [("train", 2), ("valid", 1), ("test", 1)] {
        let tracks = trainer::load_split(&root, split).unwrap();
        assert_eq!(tracks.len(), n);
        trainer::validate_tracks(&tracks, 6.0).unwrap();
    }
    assert_eq!(verify_dataset(&root).unwrap(), manifest);
}

#[test]
fn default_spec_has_eight_two_two() {
    let spec = SynthSpec::default();
    let count = |s: &str| spec.layout().iter().filter(|(split, _, _)| *split == s).count();
    assert_eq!((count("train"), count("valid"), count("test")), (8, 2, 2));
}

#[test]
fn non_empty_target_is_refused_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("notes.txt"), "keep").unwrap();
    let err = build_dataset(&small_spec(), tmp.path(), false).unwrap_err();
    assert!(matches!(err, DatagenError::NotEmpty(_)));
    build_dataset(&small_spec(), tmp.path(), true).unwrap();
    assert!(tmp.path().join("train/track000/mixture.wav").exists());
}

#[test]
fn manifest_hashes_are_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build_dataset(&small_spec(), a.path(), true).unwrap();
    let mb = build_dataset(&small_spec(), b.path(), true).unwrap();
    assert_eq!(ma, mb);
    let again = build_dataset(&small_spec(), a.path(), true).unwrap();
    assert_eq!(ma, again);
}

#[test]
fn tampering_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    build_dataset(&small_spec(), tmp.path(), false).unwrap();
    let wav = tmp.path().join("valid/track000/vocals.wav");
    let mut bytes = fs::read(&wav).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&wav, bytes).unwrap();
    assert!(matches!(
        verify_dataset(tmp.path()),
        Err(DatagenError::HashMismatch { .. })
    ));
}

fn is_zero(r: ArrayView1<f64>) -> bool {
    r.iter().all(|v| *v == 0.0)
}

#[test]
fn stem_features_are_further_apart_across_stems_than_within() {
    let spec = SynthSpec::default();
    let fit: Vec<_> = (0..6).map(|i| synth_track(&spec, i).unwrap()).collect();
    let whitener = trainer::fit_dataset_whitener(&fit, 0).unwrap();
    let (mut between, mut within) = (0.0, 0.0);
    for index in 20..30 {
        let track = synth_track(&spec, index).unwrap();
        let feats: Vec<_> = track
            .stems
            .iter()
            .zip(SourceTag::STEMS)
            .map(|(clip, tag)| extract_pseudo_vggish(clip, &whitener, tag).unwrap().frames)
            .collect();
        let t_n = feats[0].nrows();
        let (mut b_sum, mut b_n, mut w_sum, mut w_n) = (0.0, 0, 0.0, 0);
        for t in 0..t_n {
            for i in 0..4 {
                for j in i + 1..4 {
                    let (x, y) = (feats[i].row(t), feats[j].row(t));
                    if !is_zero(x) && !is_zero(y) {
                        b_sum += cosine_distance(x, y);
                        b_n += 1;
                    }
                }
            }
        }
        for f in &feats {
            for t in 0..t_n {
                for s in t + 1..t_n {
                    let (x, y) = (f.row(t), f.row(s));
                    if !is_zero(x) && !is_zero(y) {
                        w_sum += cosine_distance(x, y);
                        w_n += 1;
                    }
                }
            }
        }
        between += b_sum / b_n as f64;
        within += w_sum / w_n as f64;
    }
    let (between, within) = (between / 10.0, within / 10.0);
    assert!(between > within, "between {between:.4} within {within:.4}");
}

fn centroid(clip: &sidesep::dsp::AudioClip) -> f64 {
    let cfg = StftConfig::default();
    let mag = dsp::magnitude(&dsp::stft(&clip.to_mono(), &cfg).unwrap()).values;
    let hz_per_bin = clip.sample_rate() as f64 / cfg.win_length as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for row in mag.rows() {
        for (k, m) in row.iter().enumerate() {
            num += k as f64 * hz_per_bin * m * m;
            den += m * m;
        }
    }
    num / den
}

#[test]
fn spectral_centroids_order_bass_other_vocals() {
    let spec = SynthSpec::default();
    let mut sums = [0.0; 4];
    for index in 0..6 {
        let track = synth_track(&spec, index).unwrap();
        for (s, clip) in sums.iter_mut().zip(&track.stems) {
            *s += centroid(clip);
        }
    }
    let [vocals, _drums, bass, other] = sums;
    assert!(bass < other && other < vocals, "bass {bass} other {other} vocals {vocals}");
}

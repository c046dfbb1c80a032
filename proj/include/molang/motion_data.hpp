#pragma once

#include <optional>
#include <string>
#include <vector>

#include "molang/geom.hpp"
#include "molang/rng.hpp"
#include "molang/tensor.hpp"

namespace molang {

inline constexpr int kFrameDim = kNumJoints * 6;  // 132
inline constexpr int kMaxFrames = 150;
inline constexpr double kTargetFps = 30.0;
inline constexpr int kMaxMaskLen = 30;

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Annotation {
  int64_t start = 0;  // [start, end) in frames
  int64_t end = 0;
  std::string text;
};

// Variable-length pose sequence; frame layout is joint-major 6D
// (joint0 d6[0..6), joint1 d6[0..6), ...), kFrameDim floats per frame.
struct MotionClip {
  double fps = kTargetFps;
  int64_t frames = 0;
  std::vector<float> data;
  std::vector<Annotation> annotations;

  float* frame(int64_t t) { return data.data() + t * kFrameDim; }
  const float* frame(int64_t t) const { return data.data() + t * kFrameDim; }

  Pose pose_at(int64_t t) const;
  void set_pose(int64_t t, const Pose& p);

  std::string to_json() const;
  static MotionClip from_json(const std::string& text);
};

struct MaskSpan {
  int64_t start = 0;
  int64_t len = 0;
};

// One training example: a window of a clip paired with one annotation text.
struct DataItem {
  std::vector<float> motion;  // frames * kFrameDim
  int64_t frames = 0;
  std::string text;
  std::string label;  // class name for recognition ground truth
  int class_id = -1;
};

struct Batch {
  int64_t size = 0;
  Tensor motion;                // B x 150 x 132, zero padded
  std::vector<uint8_t> valid;   // B x 150 prefix mask
  std::vector<int64_t> length;  // valid frames per item
  std::vector<MaskSpan> spans;  // empty when masking is off
  std::vector<const DataItem*> items;
};

MotionClip resample(const MotionClip& clip, double target_fps = kTargetFps);

// Splits clips longer than max_frames into consecutive windows; annotations
// are clipped to each window they overlap.
std::vector<MotionClip> split_windows(const MotionClip& clip, int64_t max_frames = kMaxFrames);

MaskSpan sample_mask_span(int64_t t_valid, Rng& rng);

// Replaces every component in [span.start, span.start+span.len) with i.i.d.
// standard normal draws; other frames are untouched.
void apply_mask(std::vector<float>& frames, int64_t t_total, const MaskSpan& span, Rng& rng);

Batch collate(const std::vector<const DataItem*>& items, int64_t max_frames = kMaxFrames);

// ---- synthetic dataset ----

struct JointProgram {
  int joint = 0;
  Eigen::Vector3d axis{0, 0, 1};
  double amp_lo = 0.5, amp_hi = 1.0;     // radians
  double freq_lo = 0.5, freq_hi = 1.5;   // Hz
  double phase_lo = 0.0, phase_hi = 6.283185307179586;
};

struct MotionClass {
  std::string name;
  std::vector<std::string> templates;
  std::vector<JointProgram> joints;
};

struct SynthSpec {
  std::vector<MotionClass> classes;
  int clips_per_class = 100;
  double jitter_std = 0.05;  // radians, per-frame rotation jitter
  double train_fraction = 0.8;

  static SynthSpec default_spec();
  static SynthSpec from_json(const std::string& text);
};

struct InvalidSpecError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SynthClip {
  MotionClip clip;
  std::string label;
  int class_id = -1;
};

// Deterministic in (spec, seed). Clips vary in length (30..150 frames at
// 30 fps), amplitude, frequency, phase and per-frame rotation jitter.
std::vector<SynthClip> synth_generate(const SynthSpec& spec, uint64_t seed);

// stratified 80/20 split, deterministic in seed; returns indices
void synth_split(const SynthSpec& spec, size_t count, uint64_t seed,
                 std::vector<size_t>& train_idx, std::vector<size_t>& test_idx);

// ---- dataset files ----

struct ManifestEntry {
  std::string path;     // relative to the manifest file
  int annotation = 0;   // which annotation provides the pair text
  std::string label;
};

struct DatasetManifest {
  std::string split;
  std::string fingerprint;
  std::vector<ManifestEntry> entries;
};

void save_clip(const MotionClip& clip, const std::string& path);
MotionClip load_clip(const std::string& path);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// hex FNV-1a-64 digest over the concatenated clip file bytes, entry order
std::string dataset_fingerprint(const std::string& manifest_dir,
                                const std::vector<ManifestEntry>& entries);

// Writes clips + train/test manifests under out_dir; returns manifest paths.
std::pair<std::string, std::string> synth_write_dataset(const SynthSpec& spec, uint64_t seed,
                                                        const std::string& out_dir);

// resolves clip paths relative to the manifest location and loads the items
std::vector<DataItem> load_dataset(const std::string& manifest_path);

}  // namespace molang

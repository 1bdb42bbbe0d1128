#pragma once

// Feature-map frequency spectra and activation heatmaps.

#include <string>

#include <Eigen/Core>

#include "cvvnet/backbone.hpp"
#include "cvvnet/image_io.hpp"

namespace cvvnet {

enum class ChannelReduce { Mean, Max };
ChannelReduce parse_channel_reduce(const std::string& s);

/// Collapses a single-sample feature map to one (H, W) plane. Accepted
/// shapes: (C, H, W), (1, C, H, W) and (1, C, T, H, W); time is averaged
/// after the channel reduction. Throws ShapeMismatch on a batch above one.
Eigen::MatrixXd reduce_feature_map(const TensorF& fmap, ChannelReduce reduce);

/// Centered 2-D DFT of a real plane; the zero frequency sits at (H/2, W/2).
Eigen::MatrixXcd centered_dft(const Eigen::MatrixXd& plane);

struct SpectrumProfile {
  Eigen::MatrixXd power;           // |F|^2, centered, before the log
  Eigen::MatrixXd magnitude;       // log(1 + |F|), centered
  Eigen::VectorXd radial_profile;  // mean magnitude per integer-radius band
};

/// Radius of a bin is its distance to the zero frequency, rounded.
Eigen::VectorXd radial_mean(const Eigen::MatrixXd& centered);

SpectrumProfile plane_spectrum(const Eigen::MatrixXd& plane);
SpectrumProfile feature_spectrum(const TensorF& fmap, ChannelReduce reduce = ChannelReduce::Mean);

struct HeatmapOverlay {
  Eigen::MatrixXd activation;  // kFrameHeight x kFrameWidth, in [0, 1]
  SilhouetteFrame base;
  Rgb8 blend;
};

/// Channel-mean absolute activation averaged over time: (1, C, [T,] H, W) -> (H, W).
Eigen::MatrixXd activation_map(const TensorF& fmap);
/// Half-pixel-centred bilinear resampling with edge clamping.
Eigen::MatrixXd bilinear_resize(const Eigen::MatrixXd& m, Index rows, Index cols);
/// Min-max scaling to [0, 1]; a constant map becomes all zeros.
Eigen::MatrixXd minmax_normalize(const Eigen::MatrixXd& m);

HeatmapOverlay heatmap_from_feature(const TensorF& fmap, const SilhouetteFrame& base, double alpha = 0.5);
/// Runs the model in eval mode and overlays the named captured layer on the
/// clip's middle frame. Throws UnknownLayer.
HeatmapOverlay activation_heatmap(CvvNet<float>& model, const SilhouetteClip& clip, const std::string& layer,
                                  double alpha = 0.5);

/// Log-magnitude image scaled to 0..255.
Gray8 spectrum_image(const SpectrumProfile& s);
/// "radius,magnitude" rows after a header line.
std::string radial_csv(const SpectrumProfile& s);

}  // namespace cvvnet

#include <gtest/gtest.h>

#include "eio/arch.hpp"
#include "eio/rgn.hpp"
#include "support.hpp"

using namespace eio;
using eio::testsup::kResidualNet;
using eio::testsup::kSmallNet;

namespace {

ErrorCategory category_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.category();
  }
  ADD_FAILURE() << "no eio::Error thrown";
  return ErrorCategory::usage;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Arch, ParsesShapesAndParamLayers) {
  const auto g = arch::parse_arch(kSmallNet);
  EXPECT_EQ(g.input_shape(), (Shape{3, 8, 8}));
  EXPECT_EQ(g.num_classes(), 3);
  // classifier is not a gating candidate
  EXPECT_EQ(g.param_layer_ids(), (std::vector<std::string>{"c1", "c2", "c3"}));
  EXPECT_EQ(g.node(g.index_of("c2")).out_shape, (Shape{6, 4, 4}));
  EXPECT_EQ(g.fused_bn(g.index_of("c1")), g.index_of("b1"));
  EXPECT_EQ(g.feature_tap(g.index_of("c2")), g.index_of("r2"));
  EXPECT_FALSE(g.has_skip_connections());
  EXPECT_EQ(g.operator_count(), g.size() - 2);
}

TEST(Arch, ResidualTapGoesThroughAdd) {
  const auto g = arch::parse_arch(kResidualNet);
  EXPECT_TRUE(g.has_skip_connections());
  EXPECT_EQ(g.feature_tap(g.index_of("c2")), g.index_of("r2"));
}

TEST(Arch, ReferenceNetworks) {
  const auto r = arch::load_arch(std::string(EIO_ARCH_DIR) + "/resnet20.arch");
  EXPECT_EQ(r.param_layers().size(), 21u);
  EXPECT_TRUE(r.has_skip_connections());
  const auto t = arch::load_arch(std::string(EIO_ARCH_DIR) + "/toy6.arch");
  EXPECT_EQ(t.param_layers().size(), 6u);
  EXPECT_EQ(t.num_classes(), 10);
}

TEST(Arch, ResNet20RgnHasPublishedShape) {
  const auto g = arch::load_arch(std::string(EIO_ARCH_DIR) + "/resnet20.arch");
  const auto spec = arch::build_rgn_spec(g, arch::make_scope(g, arch::ScopeRequest::all()), 2);
  EXPECT_EQ(spec.L, 21);
  EXPECT_EQ(rgn::count_paths(spec).str(), "2097152");
}

TEST(Arch, ParseErrorsCarryLineNumbers) {
  EXPECT_EQ(category_of([] { arch::parse_arch("input input shape=3x8x8\nx blob\n"); }), ErrorCategory::parse);
  EXPECT_NE(message_of([] { arch::parse_arch("input input shape=3x8x8\nx blob\n"); }).find("line 2"), std::string::npos);
  EXPECT_EQ(category_of([] { arch::parse_arch("input input shape=3x8x8\noutput output\nedge input nowhere\n"); }),
            ErrorCategory::parse);
  EXPECT_EQ(category_of([] { arch::parse_arch(""); }), ErrorCategory::parse);
  EXPECT_EQ(category_of([] { arch::load_arch("/nonexistent/file.arch"); }), ErrorCategory::io);
}

TEST(Arch, RejectsCycles) {
  const char* text = R"(
input input shape=3x8x8
a conv out=4
b conv out=4
output output
edge input a
edge a b
edge b a
edge b output
)";
  EXPECT_EQ(category_of([&] { arch::parse_arch(text); }), ErrorCategory::parse);
}

TEST(Scope, ModesSelectTopologically) {
  const auto g = arch::parse_arch(kSmallNet);
  EXPECT_EQ(arch::make_scope(g, arch::ScopeRequest::all()).gated_depth(), 3);
  const auto top = arch::make_scope(g, arch::ScopeRequest::top(2));
  ASSERT_EQ(top.gated_depth(), 2);
  EXPECT_EQ(g.node(top.selected[0]).id, "c1");
  EXPECT_EQ(g.node(top.selected[1]).id, "c2");
  const auto list = arch::make_scope(g, arch::ScopeRequest::parse("list:c3,c1"));
  ASSERT_EQ(list.gated_depth(), 2);
  EXPECT_EQ(g.node(list.selected[0]).id, "c1");
  EXPECT_EQ(arch::ScopeRequest::parse("top2").to_string(), "top2");
  EXPECT_ANY_THROW(arch::make_scope(g, arch::ScopeRequest::list({"fc"})));
  EXPECT_ANY_THROW(arch::make_scope(g, arch::ScopeRequest::list({"nope"})));
  EXPECT_ANY_THROW(arch::make_scope(g, arch::ScopeRequest::top(4)));
}

TEST(Spec, DegenerateAndHash) {
  const auto a = testsup::spec_of(kSmallNet, 1);
  EXPECT_TRUE(a.degenerate());
  EXPECT_EQ(rgn::count_paths(a), 1);
  const auto b = testsup::spec_of(kSmallNet, 2);
  EXPECT_FALSE(b.degenerate());
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(b.hash(), testsup::spec_of(kSmallNet, 2).hash());
  EXPECT_NE(b.hash(), testsup::spec_of(kSmallNet, 2, "top2").hash());
  EXPECT_ANY_THROW(testsup::spec_of(kSmallNet, 0));
}

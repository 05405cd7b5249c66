use afformer::heads::{total_loss, HeadsConfig};
use afformer::heatmaps::{points_to_target, AffordanceAnnotation, GaussianTargetSpec, Heatmap};
use afformer::media::{Image, VideoClip};
use afformer::model::{Afformer, ModelConfig};
use afformer_autograd::check::check_params;
use afformer_autograd::{Ctx, ParamStore};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

struct Case {
    model: Afformer,
    clip: VideoClip,
    image: Image,
    gt: Heatmap,
    action: Option<usize>,
}

fn case(actions: Option<usize>) -> Case {
    let mut cfg = ModelConfig::tiny();
    cfg.heads.action_classes = actions;
    let model = Afformer::new(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = VideoClip::new((0..4).map(|_| random_image(&mut rng, 32, 32)).collect()).unwrap();
    let image = random_image(&mut rng, 32, 32);
    let ann = AffordanceAnnotation::new(vec![[9.0, 20.0], [12.0, 22.0]], Some(2));
    let gt = points_to_target(&ann, 32, 32, &GaussianTargetSpec::for_frame(32, 32)).unwrap();
    Case {
        model,
        clip,
        image,
        gt,
        action: actions.map(|_| 2),
    }
}

fn loss_at(c: &Case, params: &ParamStore) -> f64 {
    let mut ctx = Ctx::inference(params);
    let out = c.model.forward(&mut ctx, &c.clip, &c.image, None).unwrap();
    let l = total_loss(&mut ctx, &out, &c.gt, c.action, &HeadsConfig::default(), None).unwrap();
    ctx.value(l.total).item()
}

fn run(actions: Option<usize>, max_per_param: Option<usize>) {
    let c = case(actions);
    let mut ctx = Ctx::new(c.model.params());
    let out = c.model.forward(&mut ctx, &c.clip, &c.image, None).unwrap();
    let l = total_loss(&mut ctx, &out, &c.gt, c.action, &HeadsConfig::default(), None).unwrap();
    let mut grads = ctx.backward(l.total);
    let analytic = ctx.param_grads(&mut grads);
    let mut params = c.model.params().clone();
    let report = check_params(&|p| loss_at(&c, p), &mut params, &analytic, 1e-4, 1e-6, max_per_param);
    eprintln!("{report:?}");
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
}

#[test]
fn tiny_model_gradients_sampled() {
    run(Some(3), Some(24));
}

"""The detector: backbone, attention, four object scanners and the two-stream
classifier with refinement, wired with explicit forward/backward passes."""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import classifier as clf
from .attention import attention_backward, compute_attention, enhance, segmentation_mask
from .evaluate import Detection
from .ctc import critical_points, ctc_loss_and_grad_batch
from .nn.layers import (BatchNorm, conv2d_backward, conv2d_forward, linear_backward, linear_forward,
                        relu_backward, relu_forward, softmax, uniform_init)
from .nn.lstm import LstmParams, lstm_backward, lstm_forward
from .proposals import (boxes_to_array, generate_proposals, merge_critical_points, nms, roi_pool_backward,
                        roi_pool_batch)
from .serialize import SCAN_ORDERS, deserialize_batch, serialize_batch

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: tuple = (8, 16, 16)
    kernel: int = 6
    hidden: int = 24
    symmetric_kernels: bool = True
    scan_style: str = "serpentine"
    critical_rule: str = "median"
    merge_radius: float = 1.0
    scales: tuple = (8.0, 16.0, 32.0)  # pixels
    ratios: tuple = (0.5, 1.0, 2.0)
    pool: tuple = (2, 2)
    head_hidden: int = 64
    classes: tuple = ("crater",)
    stages: int = 3
    seg_threshold: float = 0.5
    couple_iou: float = 0.5
    refine_iou: float = 0.5
    nms_threshold: float = 0.3
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9

    @property
    def stride(self):
        return 2 ** len(self.channels)

    @property
    def grid(self):
        size = self.image_size
        for _ in self.channels:
            size = (size + 2 * ((self.kernel - 1) // 2) - self.kernel) // 2 + 1
        return size


def symmetrize(kernels):
    """Average a (k, k, C_in, C_out) kernel with its horizontal and vertical mirrors."""
    return 0.25 * (kernels + kernels[::-1] + kernels[:, ::-1] + kernels[::-1, ::-1])


def normalize_images(images):
    """uint8 (B, H, W) -> float (B, H, W, 1) roughly centred on zero."""
    return ((np.asarray(images, dtype=np.float64) - 128.0) / 64.0)[..., None]


class Detector:
    def __init__(self, config=None, seed=0):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        p = {}
        cin = 1
        for i, cout in enumerate(cfg.channels):
            fan_in = cfg.kernel * cfg.kernel * cin
            p[f"conv{i}.w"] = uniform_init(rng, (cfg.kernel, cfg.kernel, cin, cout), fan_in)
            p[f"conv{i}.b"] = np.zeros(cout)
            cin = cout
        d = cin
        p["att.w"] = uniform_init(rng, (d,), d)
        p["att.b"] = np.zeros(1)
        for k in range(len(SCAN_ORDERS)):
            lstm = LstmParams.init(rng, d, cfg.hidden)
            lstm.bias[cfg.hidden:2 * cfg.hidden] = 1.0  # forget-gate bias
            p[f"scan{k}.lstm.w"] = lstm.weight
            p[f"scan{k}.lstm.b"] = lstm.bias
            p[f"scan{k}.fc.w"] = uniform_init(rng, (cfg.hidden, 2), cfg.hidden)
            p[f"scan{k}.fc.b"] = np.zeros(2)
        feat = cfg.pool[0] * cfg.pool[1] * d
        p["head.w"] = uniform_init(rng, (feat, cfg.head_hidden), feat)
        p["head.b"] = np.zeros(cfg.head_hidden)
        c = len(cfg.classes)
        for name in ("midn1", "midn2"):
            for stream in ("det", "cls"):
                p[f"{name}.{stream}.w"] = uniform_init(rng, (cfg.head_hidden, c), cfg.head_hidden)
                p[f"{name}.{stream}.b"] = np.zeros(c)
        for k in range(cfg.stages):
            p[f"refine{k}.w"] = uniform_init(rng, (cfg.head_hidden, c + 1), cfg.head_hidden)
            p[f"refine{k}.b"] = np.zeros(c + 1)
        self.params = p
        self.bn = BatchNorm(d, cfg.bn_epsilon, cfg.bn_momentum)
        self.use_bn = False

    # -- parameter plumbing --------------------------------------------

    def state_dict(self):
        out = dict(self.params)
        out["bn.gamma"] = self.bn.gamma
        out["bn.beta"] = self.bn.beta
        out["bn.running_mean"] = self.bn.running_mean
        out["bn.running_var"] = self.bn.running_var
        out["bn.enabled"] = np.array([1.0 if self.use_bn else 0.0])
        return out

    def load_state_dict(self, state):
        missing = [k for k in self.params if k not in state]
        if missing:
            raise ValueError(f"checkpoint lacks tensors: {missing[:5]}")
        for k in self.params:
            if state[k].shape != self.params[k].shape:
                raise ValueError(f"checkpoint tensor {k} has shape {state[k].shape}, model expects "
                                 f"{self.params[k].shape}")
            self.params[k] = np.array(state[k])
        self.bn.gamma = np.array(state["bn.gamma"])
        self.bn.beta = np.array(state["bn.beta"])
        self.bn.running_mean = np.array(state["bn.running_mean"])
        self.bn.running_var = np.array(state["bn.running_var"])
        self.use_bn = bool(state["bn.enabled"][0])

    def trainable(self):
        names = list(self.params)
        if self.use_bn:
            names += ["bn.gamma", "bn.beta"]
        return names

    def get(self, name):
        if name == "bn.gamma":
            return self.bn.gamma
        if name == "bn.beta":
            return self.bn.beta
        return self.params[name]

    def set(self, name, value):
        if name == "bn.gamma":
            self.bn.gamma = value
        elif name == "bn.beta":
            self.bn.beta = value
        else:
            self.params[name] = value

    def kernel(self, i):
        w = self.params[f"conv{i}.w"]
        return symmetrize(w) if self.config.symmetric_kernels else w

    # -- region proposal half ------------------------------------------

    def features(self, x, training=False):
        """Backbone + optional batch norm + attention. Returns enhanced map, attention, cache."""
        cfg, p = self.config, self.params
        acts = [x]
        pre = []
        h = x
        for i in range(len(cfg.channels)):
            z = conv2d_forward(h, self.kernel(i), 2, (cfg.kernel - 1) // 2, p[f"conv{i}.b"])
            pre.append(z)
            h = relu_forward(z)
            acts.append(h)
        fmap = self.bn.forward(h, training) if self.use_bn else h
        att = compute_attention(fmap, p["att.w"], p["att.b"][0])
        enhanced = enhance(fmap, att)
        return enhanced, att, (acts, pre, fmap)

    def features_backward(self, d_enhanced, att, cache, grads):
        cfg, p = self.config, self.params
        acts, pre, fmap = cache
        d_fmap, dw, db = attention_backward(d_enhanced, fmap, att, p["att.w"])
        grads["att.w"] = grads.get("att.w", 0) + dw
        grads["att.b"] = grads.get("att.b", 0) + np.array([db])
        dh = d_fmap
        if self.use_bn:
            dh, dg, dbeta = self.bn.backward(d_fmap)
            grads["bn.gamma"] = dg
            grads["bn.beta"] = dbeta
        for i in reversed(range(len(cfg.channels))):
            dz = relu_backward(dh, pre[i])
            dh, dk, dbias = conv2d_backward(dz, acts[i], self.kernel(i), 2, (cfg.kernel - 1) // 2)
            grads[f"conv{i}.w"] = symmetrize(dk) if cfg.symmetric_kernels else dk
            grads[f"conv{i}.b"] = dbias
        return dh

    def scan(self, enhanced):
        """Run the four scanners. Returns per-order logits (B, T, 2) and caches."""
        cfg, p = self.config, self.params
        out = []
        for k, order in enumerate(SCAN_ORDERS):
            seq = serialize_batch(enhanced, order, cfg.scan_style)
            lstm = LstmParams(p[f"scan{k}.lstm.w"], p[f"scan{k}.lstm.b"])
            hs, lcache = lstm_forward(seq, lstm)
            logits = linear_forward(hs, p[f"scan{k}.fc.w"], p[f"scan{k}.fc.b"])
            out.append((logits, (hs, lcache)))
        return out

    def scan_backward(self, dlogits, caches, grid, grads):
        cfg, p = self.config, self.params
        h, w = grid
        d_enh = 0
        for k, order in enumerate(SCAN_ORDERS):
            hs, lcache = caches[k]
            dhs, dw, db = linear_backward(dlogits[k], hs, p[f"scan{k}.fc.w"])
            grads[f"scan{k}.fc.w"] = dw
            grads[f"scan{k}.fc.b"] = db
            dseq, dlw, dlb = lstm_backward(dhs, lcache)
            grads[f"scan{k}.lstm.w"] = dlw
            grads[f"scan{k}.lstm.b"] = dlb
            d_enh = d_enh + deserialize_batch(dseq, order, h, w, cfg.scan_style)
        return d_enh

    def decode(self, logits_per_order, grid):
        """Critical points per image, merged across the four scanners."""
        cfg = self.config
        h, w = grid
        b = logits_per_order[0].shape[0]
        merged = []
        for i in range(b):
            lists = []
            for k, order in enumerate(SCAN_ORDERS):
                y = softmax(logits_per_order[k][i])
                path = (y[:, 1] > y[:, 0]).astype(np.int8)
                lists.append(critical_points(path, order, h, w, cfg.scan_style, cfg.critical_rule, y))
            merged.append(merge_critical_points(lists, cfg.merge_radius))
        return merged

    # -- classifier half -------------------------------------------------

    def propose(self, points, grid, ratios=None):
        """Feature-space proposals around merged critical points."""
        cfg = self.config
        scales = [s / cfg.stride for s in cfg.scales]
        return generate_proposals(points, scales, ratios or cfg.ratios, grid, space="feature")

    def _linear_t(self, name, hid):
        """Scores laid out (classes, proposals)."""
        return linear_forward(hid, self.params[name + ".w"], self.params[name + ".b"]).T

    def classify(self, fmap, att, proposals, image_classes=None):
        """Score the proposals of one image.

        ``fmap`` is the enhanced (H, W, D) map and ``att`` its attention.
        With ``image_classes`` (indices) the losses and a backward cache are
        returned as well.
        """
        cfg, p = self.config, self.params
        boxes = proposals.as_array()
        pooled, arg = roi_pool_batch(fmap, proposals.boxes, cfg.pool)
        flat = pooled.reshape(len(boxes), -1)
        z = linear_forward(flat, p["head.w"], p["head.b"])
        hid = relu_forward(z)
        stage_probs = [softmax(self._linear_t(f"refine{k}", hid), axis=0) for k in range(cfg.stages)]
        out = {"stages": stage_probs}
        if image_classes is None:
            return out

        c = len(cfg.classes)
        y = np.zeros(c)
        y[list(image_classes)] = 1.0
        p1, det1, cls1 = clf.midn_forward(self._linear_t("midn1.det", hid), self._linear_t("midn1.cls", hid))
        phi1 = clf.image_scores(p1)
        mask = segmentation_mask(att)
        tops = {ci: int(np.argmax(p1[ci])) for ci in image_classes}
        kept, _ = clf.couple_filter(tops, {ci: mask for ci in image_classes}, boxes,
                                    cfg.seg_threshold, cfg.couple_iou)
        if not kept:
            kept = list(range(len(boxes)))
        kept = np.array(kept)
        p2, det2, cls2 = clf.midn_forward(self._linear_t("midn2.det", hid[kept]),
                                          self._linear_t("midn2.cls", hid[kept]))
        phi2 = clf.image_scores(p2)
        cls_loss = clf.classification_loss(phi1, y) + clf.classification_loss(phi2, y)

        seeds = []
        for ci in sorted(image_classes):
            j1, j2 = tops[ci], int(kept[np.argmax(p2[ci])])
            chosen = clf.select_final((boxes[j1], j1), (boxes[j2], j2), cfg.couple_iou)
            seeds += [(ci, j) for _, j in chosen]
        labels = clf.labels_from_seeds(seeds, boxes, c, cfg.refine_iou)
        ref_losses, d_ref = [], []
        for k, probs in enumerate(stage_probs):
            if k > 0:
                labels = clf.assign_refinement_labels(stage_probs[k - 1], image_classes, boxes, cfg.refine_iou)
            ref_losses.append(clf.refinement_loss(probs, labels))
            d_ref.append(clf.refinement_loss_grad(probs, labels))
        out.update(phi=(phi1, phi2), cls_loss=cls_loss, ref_losses=ref_losses, labels=labels)
        out["cache"] = dict(flat=flat, arg=arg, z=z, hid=hid, kept=kept, y=y, shape=fmap.shape,
                            midn=((phi1, det1, cls1), (phi2, det2, cls2)), d_ref=d_ref)
        return out

    def classify_backward(self, cache, grads, scale=1.0):
        """Accumulate parameter gradients; returns d loss / d fmap."""
        p = self.params
        hid, kept, y = cache["hid"], cache["kept"], cache["y"]
        d_hid = np.zeros_like(hid)

        def head(name, d_scores, rows):
            d_in, dw, db = linear_backward(scale * d_scores.T, hid[rows], p[name + ".w"])
            grads[name + ".w"] = grads.get(name + ".w", 0) + dw
            grads[name + ".b"] = grads.get(name + ".b", 0) + db
            d_hid[rows] += d_in

        everything = np.arange(len(hid))
        for name, rows, (phi, det, cls) in (("midn1", everything, cache["midn"][0]),
                                            ("midn2", kept, cache["midn"][1])):
            d_det, d_cls = clf.midn_backward(clf.classification_loss_grad(phi, y), det, cls)
            head(name + ".det", d_det, rows)
            head(name + ".cls", d_cls, rows)
        for k, d in enumerate(cache["d_ref"]):
            head(f"refine{k}", d, everything)
        dz = relu_backward(d_hid, cache["z"])
        d_flat, dw, db = linear_backward(dz, cache["flat"], p["head.w"])
        grads["head.w"] = grads.get("head.w", 0) + dw
        grads["head.b"] = grads.get("head.b", 0) + db
        return roi_pool_backward(d_flat.reshape(cache["arg"].shape), cache["arg"], cache["shape"])

    # -- inference -------------------------------------------------------

    def detect(self, images, ids=None, ratios=None, batch=64):
        """Full pipeline on uint8 images; returns (detections, proposals per image).

        Boxes are reported in image pixels. A proposal's score is its class
        probability averaged over the refinement stages; NMS runs per class.
        """
        cfg = self.config
        images = np.asarray(images)
        ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
        detections, proposals_out = [], []
        for s in range(0, len(images), batch):
            x = normalize_images(images[s:s + batch])
            enhanced, att, _ = self.features(x)
            grid = enhanced.shape[1:3]
            points = self.decode([o[0] for o in self.scan(enhanced)], grid)
            for i, pts in enumerate(points):
                image_id = ids[s + i]
                props = self.propose(pts, grid, ratios)
                proposals_out.append(props)
                if len(props) == 0:
                    continue
                res = self.classify(enhanced[i], att[i], props)
                score = np.mean(res["stages"], axis=0)
                boxes = props.as_array() * cfg.stride
                for ci, name in enumerate(cfg.classes):
                    for j in nms(boxes, score[ci], cfg.nms_threshold):
                        b = props.boxes[j].scaled(cfg.stride, "image")
                        detections.append(Detection(image_id, name, b.cx, b.cy, b.w, b.h, float(score[ci, j])))
        return detections, proposals_out

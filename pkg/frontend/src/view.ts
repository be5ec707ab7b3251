/**
 * DOM rendering. The render function is a pure projection of the
 * controller state; it is re-run after every interaction. No markup
 * for the image exists until the task has left the TEXT_ONLY stage.
 */
import { GUIDELINES, TIPS } from "./guidelines.js";
import { LABELS, LABEL_DISPLAY, type Label, type PhraseLists } from "./schema.js";
import type { SessionController } from "./session.js";
import { LeaseExpiredError } from "./session.js";
import type { TaskView } from "./state.js";

type Handler = () => void;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

/** The four-option answer widget; every judgment question uses it. */
export function labelWidget(prompt: string, onPick: (label: Label) => void): HTMLElement {
  const box = el("div", "label-widget");
  box.appendChild(el("p", "prompt", prompt));
  const row = el("div", "label-row");
  for (const label of LABELS) {
    const button = el("button", "label-option", LABEL_DISPLAY[label]);
    button.dataset.value = label;
    button.addEventListener("click", () => onPick(label));
    row.appendChild(button);
  }
  box.appendChild(row);
  return box;
}

function guidelinesPanel(): HTMLElement {
  const details = el("details", "guidelines");
  details.appendChild(el("summary", undefined, "Guidelines and tips"));
  const list = el("ol");
  for (const line of GUIDELINES) {
    list.appendChild(el("li", undefined, line));
  }
  details.appendChild(list);
  details.appendChild(el("p", "tips-heading", "Tips"));
  const tips = el("ul");
  for (const line of TIPS) {
    tips.appendChild(el("li", undefined, line));
  }
  details.appendChild(tips);
  return details;
}

function taskHeader(view: TaskView): HTMLElement {
  const box = el("div", "task-text");
  const rows: Array<[string, string]> = [
    ["Question", view.task.question],
    ["Answer", view.task.answer],
    ["Rationale", view.task.rationale],
  ];
  for (const [name, value] of rows) {
    const row = el("p", "task-field");
    row.appendChild(el("strong", undefined, `${name}: `));
    row.appendChild(document.createTextNode(value));
    box.appendChild(row);
  }
  return box;
}

function phrasePicker(
  phrases: PhraseLists,
  onSubmit: (picked: string[]) => void,
): HTMLElement {
  const box = el("div", "phrase-picker");
  box.appendChild(
    el(
      "p",
      "prompt",
      "Pick the nouns, noun phrases and verbs from the rationale that are unrelated to the image.",
    ),
  );
  const groups: Array<[string, string[]]> = [
    ["Nouns", phrases.nouns],
    ["Noun phrases", phrases.noun_phrases],
    ["Verb phrases", phrases.verb_phrases],
  ];
  const boxes: HTMLInputElement[] = [];
  for (const [title, options] of groups) {
    const group = el("fieldset", "phrase-group");
    group.appendChild(el("legend", undefined, title));
    if (options.length === 0) {
      group.appendChild(el("p", "empty-note", "none detected"));
    }
    for (const phrase of options) {
      const label = el("label", "phrase-option");
      const input = el("input") as HTMLInputElement;
      input.type = "checkbox";
      input.value = phrase;
      boxes.push(input);
      label.appendChild(input);
      label.appendChild(document.createTextNode(` ${phrase}`));
      group.appendChild(label);
    }
    box.appendChild(group);
  }
  const submit = el("button", "submit-phrases", "Submit judgment");
  submit.addEventListener("click", () => {
    onSubmit(boxes.filter((input) => input.checked).map((input) => input.value));
  });
  box.appendChild(submit);
  return box;
}

export interface RenderCallbacks {
  onTextual: (label: Label) => Promise<void>;
  onVisual: (label: Label) => void;
  onGrammar: (label: Label) => void;
  onUnrelated: (label: Label) => void;
  onPhrases: (picked: string[]) => Promise<void>;
  onNext: Handler;
}

export function render(
  root: HTMLElement,
  controller: SessionController,
  callbacks: RenderCallbacks,
): void {
  root.replaceChildren();
  root.appendChild(guidelinesPanel());

  for (const notice of controller.notices.splice(0)) {
    root.appendChild(el("p", "notice", notice));
  }
  if (controller.retry.size > 0) {
    root.appendChild(
      el("p", "notice", `${controller.retry.size} judgment(s) waiting to be resent`),
    );
  }

  if (controller.phase === "exhausted") {
    root.appendChild(el("h2", "done-screen", "No tasks available"));
    root.appendChild(
      el("p", undefined, "Every item has been judged. Thank you; you can close this tab."),
    );
    return;
  }

  const view = controller.view;
  if (view === null) {
    const start = el("button", "next-task", "Fetch next task");
    start.addEventListener("click", callbacks.onNext);
    root.appendChild(start);
    return;
  }

  root.appendChild(taskHeader(view));
  if (view.imageVisible && view.imageUrl !== null) {
    const image = el("img", "task-image") as HTMLImageElement;
    image.src = view.imageUrl;
    image.alt = "scene under judgment";
    root.appendChild(image);
  }

  switch (view.stage) {
    case "TEXT_ONLY":
      root.appendChild(
        labelWidget("Does the rationale support the answer?", (label) => {
          void callbacks.onTextual(label);
        }),
      );
      break;
    case "WITH_IMAGE":
      root.appendChild(
        labelWidget(
          "Does the rationale support the answer, in the context of the given image?",
          callbacks.onVisual,
        ),
      );
      break;
    case "GRAMMAR":
      root.appendChild(
        labelWidget("Is the rationale grammatical?", callbacks.onGrammar),
      );
      break;
    case "FIDELITY":
      root.appendChild(
        labelWidget(
          "Does the rationale mention persons, objects, locations or actions unrelated to the image?",
          callbacks.onUnrelated,
        ),
      );
      break;
    case "PHRASES":
      root.appendChild(
        phrasePicker(view.task.offered_phrases, (picked) => {
          void callbacks.onPhrases(picked);
        }),
      );
      break;
    case "DONE":
      break;
  }
}

/** Wire a controller to a root element and start the render loop. */
export function mount(root: HTMLElement, controller: SessionController): void {
  const redraw = (): void =>
    render(root, controller, {
      onTextual: async (label) => {
        await guard(() => controller.answerTextual(label));
        redraw();
      },
      onVisual: (label) => {
        guardSync(() => controller.answerVisual(label));
        redraw();
      },
      onGrammar: (label) => {
        guardSync(() => controller.answerGrammar(label));
        redraw();
      },
      onUnrelated: (label) => {
        guardSync(() => controller.answerUnrelated(label));
        redraw();
      },
      onPhrases: async (picked) => {
        await guard(() => controller.submitPhrases(picked).then(() => undefined));
        void controller.nextTask().then(redraw);
      },
      onNext: () => {
        void controller.nextTask().then(redraw);
      },
    });

  const guard = async (action: () => Promise<void>): Promise<void> => {
    try {
      await action();
    } catch (error) {
      handleError(error);
    }
  };
  const guardSync = (action: () => void): void => {
    try {
      action();
    } catch (error) {
      handleError(error);
    }
  };
  const handleError = (error: unknown): void => {
    if (error instanceof LeaseExpiredError) {
      return; // the controller already recorded the notice
    }
    controller.notices.push(error instanceof Error ? error.message : String(error));
  };

  void controller.nextTask().then(redraw);
}
